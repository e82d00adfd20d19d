#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>

#include "moenet/common.hpp"
#include "moenet/data.hpp"

namespace moenet {

namespace {
constexpr long kPixelBytes = 3072;
constexpr long kRecordBytes = 2 + kPixelBytes;

long expected_records(const std::string& split) {
  if (split == "train") return 50000;
  if (split == "test") return 10000;
  throw std::invalid_argument(
      strcat_msg("cifar100 split must be 'train' or 'test', got '", split, "'"));
}
}  // namespace

void Dataset::validate() const {
  if (static_cast<long>(images.size()) != size() * image_elems())
    throw FormatError("dataset: image buffer size mismatch");
  for (int y : labels)
    if (y < 0 || y >= class_count)
      throw FormatError(strcat_msg("dataset: label ", y, " outside [0,",
                                   class_count, ")"));
  for (float v : images)
    if (!(v >= 0.0f && v <= 1.0f))
      throw FormatError("dataset: pixel value outside [0,1]");
}

Dataset load_cifar100(const std::string& dir, const std::string& split) {
  const long records = expected_records(split);
  const std::string path = dir + "/" + split + ".bin";
  std::ifstream file(path, std::ios::binary | std::ios::ate);
  if (!file.is_open())
    throw FormatError(strcat_msg("cifar100: cannot open ", path));
  const long actual = static_cast<long>(file.tellg());
  const long expected = records * kRecordBytes;
  if (actual != expected)
    throw FormatError(strcat_msg("cifar100: ", path, " has ", actual,
                                 " bytes, expected ", expected, " (", records,
                                 " records of ", kRecordBytes, " bytes)"));
  file.seekg(0);
  std::vector<uint8_t> raw(static_cast<size_t>(expected));
  file.read(reinterpret_cast<char*>(raw.data()), expected);
  if (!file)
    throw FormatError(strcat_msg("cifar100: short read on ", path));

  Dataset ds;
  ds.channels = 3;
  ds.height = 32;
  ds.width = 32;
  ds.class_count = 100;
  ds.split = split;
  ds.labels.resize(records);
  ds.coarse_labels.resize(records);
  ds.images.resize(static_cast<size_t>(records) * kPixelBytes);
  for (long r = 0; r < records; ++r) {
    const uint8_t* rec = raw.data() + r * kRecordBytes;
    ds.coarse_labels[r] = rec[0];
    ds.labels[r] = rec[1];
    float* img = ds.images.data() + r * kPixelBytes;
    for (long i = 0; i < kPixelBytes; ++i)
      img[i] = static_cast<float>(rec[2 + i]) / 255.0f;
  }
  ds.validate();
  return ds;
}

void write_cifar100(const Dataset& ds, const std::string& path) {
  if (ds.image_elems() != kPixelBytes)
    throw FormatError("write_cifar100: dataset is not 3x32x32");
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file.is_open())
    throw FormatError(strcat_msg("write_cifar100: cannot open ", path));
  std::vector<uint8_t> rec(kRecordBytes);
  for (long r = 0; r < ds.size(); ++r) {
    rec[0] = static_cast<uint8_t>(
        ds.coarse_labels.empty() ? 0 : ds.coarse_labels[r]);
    rec[1] = static_cast<uint8_t>(ds.labels[r]);
    auto img = ds.image(r);
    for (long i = 0; i < kPixelBytes; ++i)
      rec[2 + i] = static_cast<uint8_t>(
          std::lround(static_cast<double>(img[i]) * 255.0));
    file.write(reinterpret_cast<const char*>(rec.data()), kRecordBytes);
  }
  if (!file) throw FormatError(strcat_msg("write_cifar100: write failed: ", path));
}

Dataset make_synthetic(int classes, int per_class, std::array<int, 3> shape,
                       uint64_t seed, double separation, double noise) {
  if (classes < 2)
    throw std::invalid_argument("make_synthetic: classes must be >= 2");
  if (per_class < 1)
    throw std::invalid_argument("make_synthetic: per_class must be >= 1");
  const int C = shape[0], H = shape[1], W = shape[2];
  const long per = static_cast<long>(C) * H * W;

  // Per-class smooth pattern: a coarse Gaussian grid, bilinearly upsampled.
  constexpr int kGrid = 4;
  std::vector<std::vector<double>> patterns(classes);
  Rng base(seed);
  for (int cls = 0; cls < classes; ++cls) {
    Rng rng = base.fork(1000 + cls);
    std::vector<double> grid(static_cast<size_t>(C) * kGrid * kGrid);
    for (auto& g : grid) g = rng.normal();
    std::vector<double>& pat = patterns[cls];
    pat.resize(per);
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const double gy = (H == 1) ? 0.0
                                     : static_cast<double>(y) * (kGrid - 1) /
                                           (H - 1);
          const double gx = (W == 1) ? 0.0
                                     : static_cast<double>(x) * (kGrid - 1) /
                                           (W - 1);
          const int y0 = static_cast<int>(gy), x0 = static_cast<int>(gx);
          const int y1 = std::min(y0 + 1, kGrid - 1);
          const int x1 = std::min(x0 + 1, kGrid - 1);
          const double fy = gy - y0, fx = gx - x0;
          const auto at = [&](int yy, int xx) {
            return grid[(static_cast<size_t>(c) * kGrid + yy) * kGrid + xx];
          };
          const double v = at(y0, x0) * (1 - fy) * (1 - fx) +
                           at(y0, x1) * (1 - fy) * fx +
                           at(y1, x0) * fy * (1 - fx) + at(y1, x1) * fy * fx;
          pat[(static_cast<long>(c) * H + y) * W + x] = v;
        }
  }

  Dataset ds;
  ds.channels = C;
  ds.height = H;
  ds.width = W;
  ds.class_count = classes;
  ds.split = "synthetic";
  const long total = static_cast<long>(classes) * per_class;
  ds.images.resize(total * per);
  ds.labels.resize(total);
  long row = 0;
  for (int cls = 0; cls < classes; ++cls) {
    Rng rng = base.fork(2000 + cls);
    for (int i = 0; i < per_class; ++i, ++row) {
      ds.labels[row] = cls;
      float* img = ds.images.data() + row * per;
      for (long p = 0; p < per; ++p) {
        const double v = 0.5 + 0.25 * separation * patterns[cls][p] +
                         noise * rng.normal();
        img[p] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return ds;
}

Dataset subset(const Dataset& ds, int per_class, uint64_t seed) {
  std::map<int, std::vector<long>> by_class;
  for (long i = 0; i < ds.size(); ++i) by_class[ds.labels[i]].push_back(i);
  for (int cls = 0; cls < ds.class_count; ++cls) {
    auto it = by_class.find(cls);
    const long have = it == by_class.end() ? 0 : static_cast<long>(it->second.size());
    if (have < per_class)
      throw std::invalid_argument(strcat_msg("subset: class ", cls, " has ",
                                             have, " samples, need ",
                                             per_class));
  }
  Rng rng(seed);
  std::vector<long> keep;
  for (auto& [cls, indices] : by_class) {
    Rng crng = rng.fork(static_cast<uint64_t>(cls));
    crng.shuffle(indices);
    keep.insert(keep.end(), indices.begin(), indices.begin() + per_class);
  }
  std::sort(keep.begin(), keep.end());

  Dataset out;
  out.channels = ds.channels;
  out.height = ds.height;
  out.width = ds.width;
  out.class_count = ds.class_count;
  out.split = ds.split;
  const long per = ds.image_elems();
  out.images.resize(keep.size() * per);
  out.labels.resize(keep.size());
  if (!ds.coarse_labels.empty()) out.coarse_labels.resize(keep.size());
  for (size_t j = 0; j < keep.size(); ++j) {
    auto img = ds.image(keep[j]);
    std::copy(img.begin(), img.end(), out.images.begin() + j * per);
    out.labels[j] = ds.labels[keep[j]];
    if (!ds.coarse_labels.empty())
      out.coarse_labels[j] = ds.coarse_labels[keep[j]];
  }
  return out;
}

Dataset take_first_classes(const Dataset& ds, int k) {
  if (k < 1 || k > ds.class_count)
    throw std::invalid_argument("take_first_classes: bad class count");
  Dataset out;
  out.channels = ds.channels;
  out.height = ds.height;
  out.width = ds.width;
  out.class_count = k;
  out.split = ds.split;
  const long per = ds.image_elems();
  for (long i = 0; i < ds.size(); ++i) {
    if (ds.labels[i] >= k) continue;
    auto img = ds.image(i);
    out.images.insert(out.images.end(), img.begin(), img.end());
    out.labels.push_back(ds.labels[i]);
    if (!ds.coarse_labels.empty())
      out.coarse_labels.push_back(ds.coarse_labels[i]);
  }
  (void)per;
  return out;
}

void write_cifar100_standin(const std::string& dir, uint64_t seed) {
  constexpr int kClasses = 100;
  constexpr int kTrainPerClass = 500;
  constexpr int kTestPerClass = 100;
  Dataset pool =
      make_synthetic(kClasses, kTrainPerClass + kTestPerClass, {3, 32, 32},
                     seed, /*separation=*/1.2, /*noise=*/0.18);
  // Coarse label: fixed 5-to-1 grouping of fine labels.
  pool.coarse_labels.resize(pool.size());
  for (long i = 0; i < pool.size(); ++i)
    pool.coarse_labels[i] = pool.labels[i] / 5;

  Dataset train, test;
  for (Dataset* d : {&train, &test}) {
    d->channels = 3;
    d->height = 32;
    d->width = 32;
    d->class_count = kClasses;
  }
  train.split = "train";
  test.split = "test";
  std::vector<int> seen(kClasses, 0);
  const long per = pool.image_elems();
  for (long i = 0; i < pool.size(); ++i) {
    const int cls = pool.labels[i];
    Dataset* dst = seen[cls] < kTrainPerClass ? &train : &test;
    ++seen[cls];
    auto img = pool.image(i);
    dst->images.insert(dst->images.end(), img.begin(), img.end());
    dst->labels.push_back(cls);
    dst->coarse_labels.push_back(pool.coarse_labels[i]);
  }
  (void)per;
  write_cifar100(train, dir + "/train.bin");
  write_cifar100(test, dir + "/test.bin");
}

void augment_image(float* img, int c, int h, int w, Rng& rng) {
  constexpr int kPad = 4;
  const int dy = static_cast<int>(rng.uniform_int(2 * kPad + 1)) - kPad;
  const int dx = static_cast<int>(rng.uniform_int(2 * kPad + 1)) - kPad;
  const bool flip = rng.bernoulli(0.5);
  std::vector<float> src(img, img + static_cast<long>(c) * h * w);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const int sy = y + dy;
        int sx = x + dx;
        if (flip) sx = w - 1 - sx;
        float v = 0.0f;
        if (sy >= 0 && sy < h && sx >= 0 && sx < w)
          v = src[(static_cast<long>(ch) * h + sy) * w + sx];
        img[(static_cast<long>(ch) * h + y) * w + x] = v;
      }
}

}  // namespace moenet
