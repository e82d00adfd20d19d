#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "moenet/rng.hpp"
#include "moenet/tensor.hpp"

namespace moenet {

// Immutable image classification dataset. Pixel values live in [0,1] so the
// attack epsilon is in natural input units.
struct Dataset {
  int channels = 3, height = 32, width = 32;
  int class_count = 0;
  std::string split = "train";
  std::vector<float> images;        // size * C*H*W
  std::vector<int> labels;          // fine labels in [0, class_count)
  std::vector<int> coarse_labels;   // CIFAR-100 only; may be empty

  long size() const { return static_cast<long>(labels.size()); }
  long image_elems() const {
    return static_cast<long>(channels) * height * width;
  }
  std::span<const float> image(long i) const {
    return std::span<const float>(images.data() + i * image_elems(),
                                  static_cast<size_t>(image_elems()));
  }
  void validate() const;
};

// CIFAR-100 binary format: per record 1 coarse-label byte, 1 fine-label
// byte, 3072 pixel bytes (channel-major R,G,B; row-major within channel).
// split selects train.bin (50000 records) or test.bin (10000 records).
Dataset load_cifar100(const std::string& dir, const std::string& split);

// Re-serializes a dataset in the same binary layout (pixels rounded back to
// bytes; exact for anything that came out of load_cifar100).
void write_cifar100(const Dataset& ds, const std::string& path);

// Class-conditional synthetic data: each class owns a fixed smooth spatial
// pattern; images are pattern * separation + Gaussian pixel noise, clamped
// to [0,1]. separation 0 makes classes indistinguishable.
Dataset make_synthetic(int classes, int per_class,
                       std::array<int, 3> shape /*(C,H,W)*/, uint64_t seed,
                       double separation = 1.0, double noise = 0.15);

// Class-balanced deterministic subsample: per_class examples of every class.
Dataset subset(const Dataset& ds, int per_class, uint64_t seed);

// Format-faithful CIFAR-100 stand-in for environments without the real
// dataset: writes train.bin/test.bin with the exact binary layout and record
// counts, filled with learnable class-conditional synthetic images.
// Deterministic given the seed.
void write_cifar100_standin(const std::string& dir, uint64_t seed = 9001);

// Keeps only fine labels 0..k-1 (labels already contiguous, no remap).
Dataset take_first_classes(const Dataset& ds, int k);

// ---------------------------------------------------------------------------
// Batch construction
// ---------------------------------------------------------------------------

// Standard CIFAR augmentation: zero-pad 4, random crop, horizontal flip.
// Applied functionally on the batch copy; the dataset never changes.
void augment_image(float* img, int c, int h, int w, Rng& rng);

template <typename T>
std::pair<Tensor<T>, std::vector<int>> make_batch(const Dataset& ds,
                                                  std::span<const long> idx,
                                                  bool augment = false,
                                                  Rng* rng = nullptr) {
  const long per = ds.image_elems();
  std::vector<T> values(static_cast<size_t>(idx.size()) * per);
  std::vector<int> labels(idx.size());
  std::vector<float> scratch;
  for (size_t j = 0; j < idx.size(); ++j) {
    auto img = ds.image(idx[j]);
    if (augment) {
      scratch.assign(img.begin(), img.end());
      augment_image(scratch.data(), ds.channels, ds.height, ds.width, *rng);
      for (long i = 0; i < per; ++i)
        values[j * per + i] = static_cast<T>(scratch[i]);
    } else {
      for (long i = 0; i < per; ++i)
        values[j * per + i] = static_cast<T>(img[i]);
    }
    labels[j] = ds.labels[idx[j]];
  }
  Tensor<T> x = Tensor<T>::from_values(
      Shape{static_cast<int>(idx.size()), ds.channels, ds.height, ds.width},
      std::move(values), false);
  return {std::move(x), std::move(labels)};
}

}  // namespace moenet
