#pragma once

// Shared test scaffolding: tiny probe models, weight transplanting between
// structurally different models, and the shared stand-in dataset location.

#include <filesystem>
#include <fstream>
#include <functional>
#include <string>

#include "moenet/config.hpp"
#include "moenet/layers.hpp"
#include "moenet/resnet.hpp"
#include "moenet/train.hpp"

namespace moenet::testing {

// Linear classifier on (B,D,1,1) inputs; the closed-form attack oracle.
template <typename T>
class LinearProbe : public Module<T> {
 public:
  LinearProbe(int in_features, int classes) : fc_(in_features, classes, true) {
    this->register_module("fc", &fc_);
  }
  Tensor<T> forward(const Tensor<T>& x) override { return fc_.forward(x); }
  Linear<T>& fc() { return fc_; }

 private:
  Linear<T> fc_;
};

// Flattens dataset images into (B, C*H*W, 1, 1) tensors for probe models.
template <typename T>
std::pair<Tensor<T>, std::vector<int>> flat_batch(const Dataset& ds,
                                                  long begin, long end) {
  const long per = ds.image_elems();
  std::vector<T> vals(static_cast<size_t>(end - begin) * per);
  std::vector<int> labels(end - begin);
  for (long i = begin; i < end; ++i) {
    auto img = ds.image(i);
    for (long j = 0; j < per; ++j)
      vals[(i - begin) * per + j] = static_cast<T>(img[j]);
    labels[i - begin] = ds.labels[i];
  }
  return {Tensor<T>::from_values(
              Shape{static_cast<int>(end - begin), static_cast<int>(per), 1, 1},
              std::move(vals), false),
          std::move(labels)};
}

// Copies parameters and buffers from src into dst, renaming through map_name
// (return empty string to skip an entry). Missing targets are errors.
template <typename T>
void transplant_state(
    Module<T>& src, Module<T>& dst,
    const std::function<std::string(const std::string&)>& map_name) {
  std::map<std::string, Parameter<T>*> dst_params;
  dst.visit_parameters([&](const std::string& n, Parameter<T>& p) {
    dst_params[n] = &p;
  });
  std::map<std::string, std::vector<double>*> dst_buffers;
  dst.visit_buffers([&](const std::string& n, std::vector<double>& b) {
    dst_buffers[n] = &b;
  });
  src.visit_parameters([&](const std::string& n, Parameter<T>& p) {
    const std::string target = map_name(n);
    if (target.empty()) return;
    auto it = dst_params.find(target);
    if (it == dst_params.end())
      throw std::logic_error("transplant_state: no target parameter " + target);
    auto dv = it->second->value.mutable_values();
    auto sv = p.value.values();
    std::copy(sv.begin(), sv.end(), dv.begin());
  });
  src.visit_buffers([&](const std::string& n, std::vector<double>& b) {
    const std::string target = map_name(n);
    if (target.empty()) return;
    auto it = dst_buffers.find(target);
    if (it == dst_buffers.end())
      throw std::logic_error("transplant_state: no target buffer " + target);
    *it->second = b;
  });
}

// Stand-in CIFAR-100 binaries shared by unit and acceptance suites;
// generated on first use.
inline std::string standin_cifar_dir() {
  const std::string dir = MOENET_TEST_DATA_DIR;
  const std::string marker = dir + "/.standin_ready";
  if (!std::filesystem::exists(marker)) {
    std::filesystem::create_directories(dir);
    write_cifar100_standin(dir);
    std::ofstream(marker) << "ok\n";
  }
  return dir;
}

template <typename T>
std::vector<T> snapshot_parameters(Module<T>& m) {
  std::vector<T> out;
  m.visit_parameters([&](const std::string&, Parameter<T>& p) {
    auto v = p.value.values();
    out.insert(out.end(), v.begin(), v.end());
  });
  return out;
}

}  // namespace moenet::testing
