#include "ckd/dataset.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace ckd {

namespace {

void read_cifar_file(const std::filesystem::path& path, int label_bytes, int label_offset,
                     std::vector<std::uint8_t>& labels, std::vector<std::uint8_t>& pixels) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(fmt::format("cannot open dataset file {}", path.string()));
  const int record = label_bytes + 3072;
  std::vector<char> buf(static_cast<std::size_t>(record));
  while (f.read(buf.data(), record)) {
    labels.push_back(static_cast<std::uint8_t>(buf[static_cast<std::size_t>(label_offset)]));
    pixels.insert(pixels.end(), buf.begin() + label_bytes, buf.end());
  }
  if (f.gcount() != 0) throw IoError(fmt::format("truncated dataset file {}", path.string()));
}

DataSplit to_split(const std::vector<std::uint8_t>& labels, const std::vector<std::uint8_t>& pixels) {
  const int n = static_cast<int>(labels.size());
  DataSplit split;
  split.images = Tensor({n, 3, 32, 32});
  split.labels.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    split.labels[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(i)];
    const std::uint8_t* src = pixels.data() + static_cast<std::size_t>(i) * 3072;
    float* dst = split.images.data() + static_cast<std::int64_t>(i) * 3072;
    for (int j = 0; j < 3072; ++j) dst[j] = static_cast<float>(src[j]) / 255.0f;
  }
  return split;
}

}  // namespace

Dataset load_cifar10(const std::filesystem::path& dir) {
  Dataset ds;
  ds.name = "cifar10";
  ds.num_classes = 10;
  ds.resolution = 32;
  std::vector<std::uint8_t> labels, pixels;
  for (int b = 1; b <= 5; ++b) {
    read_cifar_file(dir / fmt::format("data_batch_{}.bin", b), 1, 0, labels, pixels);
  }
  ds.train = to_split(labels, pixels);
  labels.clear();
  pixels.clear();
  read_cifar_file(dir / "test_batch.bin", 1, 0, labels, pixels);
  ds.test = to_split(labels, pixels);
  return ds;
}

Dataset load_cifar100(const std::filesystem::path& dir) {
  Dataset ds;
  ds.name = "cifar100";
  ds.num_classes = 100;
  ds.resolution = 32;
  std::vector<std::uint8_t> labels, pixels;
  read_cifar_file(dir / "train.bin", 2, 1, labels, pixels);  // [coarse, fine, pixels]
  ds.train = to_split(labels, pixels);
  labels.clear();
  pixels.clear();
  read_cifar_file(dir / "test.bin", 2, 1, labels, pixels);
  ds.test = to_split(labels, pixels);
  return ds;
}

namespace {

struct SineField {
  double fx, fy, phase, amp;
  int channel;
};

std::vector<SineField> random_fields(Rng& rng, int n, double amp, double max_freq) {
  std::vector<SineField> fields;
  fields.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    fields.push_back({rng.uniform(0.5, max_freq), rng.uniform(0.5, max_freq),
                      rng.uniform(0.0, 2.0 * M_PI), amp * rng.uniform(0.5, 1.0),
                      static_cast<int>(rng.bounded(3))});
  }
  return fields;
}

void add_fields(std::vector<float>& img, int res, const std::vector<SineField>& fields) {
  for (const auto& f : fields) {
    float* plane = img.data() + static_cast<std::size_t>(f.channel) * res * res;
    for (int y = 0; y < res; ++y) {
      for (int x = 0; x < res; ++x) {
        plane[y * res + x] += static_cast<float>(
            f.amp * std::sin(2.0 * M_PI * (f.fx * x + f.fy * y) / res + f.phase));
      }
    }
  }
}

struct Blob {
  double cx, cy, sigma, amp;
  int channel;
};

void add_blob(std::vector<float>& img, int res, const Blob& b) {
  float* plane = img.data() + static_cast<std::size_t>(b.channel) * res * res;
  const double inv = 1.0 / (2.0 * b.sigma * b.sigma);
  for (int y = 0; y < res; ++y) {
    for (int x = 0; x < res; ++x) {
      const double d2 = (x - b.cx) * (x - b.cx) + (y - b.cy) * (y - b.cy);
      plane[y * res + x] += static_cast<float>(b.amp * std::exp(-d2 * inv));
    }
  }
}

}  // namespace

Dataset make_synthetic(const SyntheticSpec& spec) {
  if (spec.num_classes < 2) throw ArgumentError("synthetic dataset needs at least 2 classes");
  if (spec.resolution < 8) throw ArgumentError("synthetic dataset resolution must be >= 8");
  const int K = spec.num_classes;
  const int res = spec.resolution;
  const int plane = res * res;

  // Class prototypes: cluster base + class-specific blobs and grating.
  Rng proto_rng(mix_seed(spec.seed, "synth-proto"));
  const int clusters = std::max(1, std::min(spec.clusters, K));
  std::vector<std::vector<SineField>> cluster_base(static_cast<std::size_t>(clusters));
  for (auto& base : cluster_base) base = random_fields(proto_rng, 3, 0.5, 3.0);

  std::vector<std::vector<float>> prototypes(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    auto& proto = prototypes[static_cast<std::size_t>(k)];
    proto.assign(static_cast<std::size_t>(3 * plane), 0.0f);
    add_fields(proto, res, cluster_base[static_cast<std::size_t>(k % clusters)]);
    for (int b = 0; b < 3; ++b) {
      add_blob(proto, res,
               {proto_rng.uniform(0.2, 0.8) * res, proto_rng.uniform(0.2, 0.8) * res,
                proto_rng.uniform(0.06, 0.14) * res, spec.signal * proto_rng.uniform(0.7, 1.3),
                static_cast<int>(proto_rng.bounded(3))});
    }
    add_fields(proto, res, random_fields(proto_rng, 1, spec.signal * 0.6, 8.0));
  }

  auto fill_split = [&](DataSplit& split, int per_class, std::string_view stream) {
    const int n = per_class * K;
    split.images = Tensor({n, 3, res, res});
    split.labels.resize(static_cast<std::size_t>(n));
    Rng rng(mix_seed(spec.seed, stream));
    std::vector<float> work(static_cast<std::size_t>(3 * plane));
    int idx = 0;
    for (int k = 0; k < K; ++k) {
      for (int i = 0; i < per_class; ++i, ++idx) {
        const auto& proto = prototypes[static_cast<std::size_t>(k)];
        const int dx = static_cast<int>(rng.bounded(static_cast<std::uint64_t>(2 * spec.max_shift + 1))) - spec.max_shift;
        const int dy = static_cast<int>(rng.bounded(static_cast<std::uint64_t>(2 * spec.max_shift + 1))) - spec.max_shift;
        for (int c = 0; c < 3; ++c) {
          const float* src = proto.data() + static_cast<std::size_t>(c) * plane;
          float* dst = work.data() + static_cast<std::size_t>(c) * plane;
          for (int y = 0; y < res; ++y) {
            const int sy = ((y + dy) % res + res) % res;
            for (int x = 0; x < res; ++x) {
              const int sx = ((x + dx) % res + res) % res;
              dst[y * res + x] = src[sy * res + sx];
            }
          }
        }
        add_fields(work, res, random_fields(rng, 3, spec.nuisance, 4.0));
        float* out = split.images.data() + static_cast<std::int64_t>(idx) * 3 * plane;
        for (int j = 0; j < 3 * plane; ++j) {
          const double v = 0.5 + 0.35 * work[static_cast<std::size_t>(j)] + spec.noise * rng.normal();
          out[j] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
        split.labels[static_cast<std::size_t>(idx)] = k;
      }
    }
  };

  Dataset ds;
  ds.name = fmt::format("synth{}", K);
  ds.num_classes = K;
  ds.resolution = res;
  fill_split(ds.train, spec.train_per_class, "synth-train");
  fill_split(ds.test, spec.test_per_class, "synth-test");
  return ds;
}

Dataset subset_train(const Dataset& ds, double fraction, std::uint64_t seed) {
  if (fraction <= 0.0 || fraction > 1.0) {
    throw ArgumentError(fmt::format("subset fraction must be in (0, 1], got {}", fraction));
  }
  if (fraction == 1.0) return ds;
  // Stratified pick: keep ceil(fraction * count) per class.
  std::vector<std::vector<int>> by_class(static_cast<std::size_t>(ds.num_classes));
  for (int i = 0; i < ds.train.count(); ++i) {
    by_class[static_cast<std::size_t>(ds.train.labels[static_cast<std::size_t>(i)])].push_back(i);
  }
  Rng rng(mix_seed(seed, "subset"));
  std::vector<int> keep;
  for (auto& cls : by_class) {
    rng.shuffle(cls);
    const auto take = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(cls.size())));
    keep.insert(keep.end(), cls.begin(), cls.begin() + static_cast<std::ptrdiff_t>(std::min(take, cls.size())));
  }
  std::sort(keep.begin(), keep.end());

  Dataset out;
  out.name = ds.name;
  out.num_classes = ds.num_classes;
  out.resolution = ds.resolution;
  out.test = ds.test;
  gather_batch(ds.train, keep, out.train.images, out.train.labels);
  return out;
}

void gather_batch(const DataSplit& split, const std::vector<int>& indices, Tensor& images,
                  std::vector<int>& labels) {
  const int n = static_cast<int>(indices.size());
  const int C = split.images.dim(1), H = split.images.dim(2), W = split.images.dim(3);
  const std::int64_t stride = static_cast<std::int64_t>(C) * H * W;
  images = Tensor({n, C, H, W});
  labels.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int src = indices[static_cast<std::size_t>(i)];
    std::copy(split.images.data() + src * stride, split.images.data() + (src + 1) * stride,
              images.data() + i * stride);
    labels[static_cast<std::size_t>(i)] = split.labels[static_cast<std::size_t>(src)];
  }
}

void augment_standard(Tensor& images, Rng& rng) {
  const int N = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
  const int pad = 4;
  std::vector<float> padded(static_cast<std::size_t>(C) * (H + 2 * pad) * (W + 2 * pad));
  const int PH = H + 2 * pad, PW = W + 2 * pad;
  for (int n = 0; n < N; ++n) {
    const int oy = static_cast<int>(rng.bounded(static_cast<std::uint64_t>(2 * pad + 1)));
    const int ox = static_cast<int>(rng.bounded(static_cast<std::uint64_t>(2 * pad + 1)));
    const bool flip = rng.flip(0.5);
    float* img = images.data() + static_cast<std::int64_t>(n) * C * H * W;
    std::fill(padded.begin(), padded.end(), 0.0f);
    for (int c = 0; c < C; ++c) {
      for (int y = 0; y < H; ++y) {
        std::copy(img + (static_cast<std::int64_t>(c) * H + y) * W,
                  img + (static_cast<std::int64_t>(c) * H + y) * W + W,
                  padded.data() + (static_cast<std::size_t>(c) * PH + y + pad) * PW + pad);
      }
    }
    for (int c = 0; c < C; ++c) {
      for (int y = 0; y < H; ++y) {
        const float* row = padded.data() + (static_cast<std::size_t>(c) * PH + y + oy) * PW + ox;
        float* dst = img + (static_cast<std::int64_t>(c) * H + y) * W;
        if (flip) {
          for (int x = 0; x < W; ++x) dst[x] = row[W - 1 - x];
        } else {
          std::copy(row, row + W, dst);
        }
      }
    }
  }
}

std::vector<std::vector<int>> make_batches(int count, int batch_size, Rng& rng) {
  std::vector<int> order(static_cast<std::size_t>(count));
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  std::vector<std::vector<int>> batches;
  for (int start = 0; start < count; start += batch_size) {
    const int end = std::min(count, start + batch_size);
    batches.emplace_back(order.begin() + start, order.begin() + end);
  }
  return batches;
}

std::vector<std::vector<int>> make_eval_batches(int count, int batch_size) {
  std::vector<std::vector<int>> batches;
  for (int start = 0; start < count; start += batch_size) {
    const int end = std::min(count, start + batch_size);
    std::vector<int> idx(static_cast<std::size_t>(end - start));
    std::iota(idx.begin(), idx.end(), start);
    batches.push_back(std::move(idx));
  }
  return batches;
}

}  // namespace ckd
