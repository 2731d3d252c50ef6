#include "seibw/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "seibw/serialize.hpp"

namespace seibw {

template <class T>
TensorT<T> DatasetT<T>::sample(std::size_t i) const {
  SEIBW_CHECK_VALUE(i < size(), "dataset: sample index out of range");
  if (!temporal) {
    std::vector<std::size_t> shape(samples.shape().begin() + 1, samples.shape().end());
    TensorT<T> out(shape);
    const std::size_t n = out.numel();
    std::copy(samples.data() + i * n, samples.data() + (i + 1) * n, out.data());
    return out;
  }
  // [T,N,...] -> [T,...]
  const std::size_t horizon = samples.dim(0);
  const std::size_t N = samples.dim(1);
  std::vector<std::size_t> shape;
  shape.push_back(horizon);
  for (std::size_t d = 2; d < samples.rank(); ++d) shape.push_back(samples.dim(d));
  TensorT<T> out(shape);
  const std::size_t per = out.numel() / horizon;
  for (std::size_t t = 0; t < horizon; ++t)
    std::copy(samples.data() + (t * N + i) * per, samples.data() + (t * N + i + 1) * per,
              out.data() + t * per);
  return out;
}

template <class T>
void DatasetT<T>::validate() const {
  const std::size_t N = temporal ? samples.dim(1) : samples.dim(0);
  SEIBW_CHECK_VALUE(labels.size() == N, "dataset: label count != sample count");
  for (auto y : labels)
    SEIBW_CHECK_VALUE(y >= 0 && static_cast<std::size_t>(y) < num_classes,
                      "dataset: label out of range");
}

namespace {

std::uint32_t read_be_u32(std::istream& f, const std::string& path) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  SEIBW_CHECK_FORMAT(f.gcount() == 4, "idx: truncated header: " + path);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
         std::uint32_t(b[3]);
}

}  // namespace

IdxContent load_idx(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  SEIBW_CHECK_FORMAT(f.good(), "idx: cannot open: " + path);
  const std::uint32_t magic = read_be_u32(f, path);
  IdxContent out;
  if (magic == 0x00000801u) {
    const std::uint32_t n = read_be_u32(f, path);
    std::vector<char> buf(n);
    f.read(buf.data(), n);
    SEIBW_CHECK_FORMAT(static_cast<std::uint32_t>(f.gcount()) == n, "idx: truncated labels: " + path);
    out.labels.resize(n);
    for (std::uint32_t i = 0; i < n; ++i)
      out.labels[i] = static_cast<std::int32_t>(static_cast<unsigned char>(buf[i]));
    return out;
  }
  SEIBW_CHECK_FORMAT(magic == 0x00000803u, "idx: bad magic: " + path);
  const std::uint32_t n = read_be_u32(f, path);
  const std::uint32_t rows = read_be_u32(f, path);
  const std::uint32_t cols = read_be_u32(f, path);
  const std::size_t count = std::size_t(n) * rows * cols;
  std::vector<char> buf(count);
  f.read(buf.data(), static_cast<std::streamsize>(count));
  SEIBW_CHECK_FORMAT(static_cast<std::size_t>(f.gcount()) == count, "idx: truncated images: " + path);
  out.is_images = true;
  out.images = Tensor({n, 1, rows, cols});
  for (std::size_t i = 0; i < count; ++i)
    out.images[i] = static_cast<float>(static_cast<unsigned char>(buf[i])) / 255.0f;
  return out;
}

Dataset load_mnist(const std::string& dir, bool train) {
  const std::string stem = train ? "train" : "t10k";
  IdxContent images = load_idx(dir + "/" + stem + "-images-idx3-ubyte");
  IdxContent labels = load_idx(dir + "/" + stem + "-labels-idx1-ubyte");
  SEIBW_CHECK_FORMAT(images.is_images && !labels.is_images, "mnist: unexpected idx contents");
  SEIBW_CHECK_FORMAT(images.images.dim(0) == labels.labels.size(),
                     "mnist: image/label count mismatch");
  Dataset ds;
  ds.samples = std::move(images.images);
  ds.labels = std::move(labels.labels);
  ds.num_classes = 10;
  ds.validate();
  return ds;
}

Dataset load_cifar10_bin(const std::string& dir) {
  namespace fs = std::filesystem;
  std::vector<std::string> files;
  SEIBW_CHECK_FORMAT(fs::exists(dir), "cifar10: directory not found: " + dir);
  if (fs::is_directory(dir)) {
    for (const auto& e : fs::directory_iterator(dir))
      if (e.path().extension() == ".bin") files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
  } else {
    files.push_back(dir);
  }
  SEIBW_CHECK_FORMAT(!files.empty(), "cifar10: no .bin batch files under " + dir);

  constexpr std::size_t kRecord = 3073;
  constexpr std::size_t kPixels = 3072;
  std::vector<char> all;
  for (const auto& p : files) {
    std::ifstream f(p, std::ios::binary);
    SEIBW_CHECK_FORMAT(f.good(), "cifar10: cannot open: " + p);
    std::vector<char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    SEIBW_CHECK_FORMAT(!buf.empty() && buf.size() % kRecord == 0,
                       "cifar10: size not divisible by 3073: " + p);
    all.insert(all.end(), buf.begin(), buf.end());
  }
  const std::size_t n = all.size() / kRecord;
  Dataset ds;
  ds.samples = Tensor({n, 3, 32, 32});
  ds.labels.resize(n);
  ds.num_classes = 10;
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* rec = reinterpret_cast<const unsigned char*>(all.data() + i * kRecord);
    ds.labels[i] = static_cast<std::int32_t>(rec[0]);
    for (std::size_t j = 0; j < kPixels; ++j)
      ds.samples[i * kPixels + j] = static_cast<float>(rec[1 + j]) / 255.0f;
  }
  ds.validate();
  return ds;
}

void write_cifar10_bin(const Dataset& ds, const std::string& path) {
  SEIBW_CHECK_VALUE(!ds.temporal && ds.samples.rank() == 4 && ds.samples.dim(1) == 3 &&
                        ds.samples.dim(2) == 32 && ds.samples.dim(3) == 32,
                    "cifar10 writer: [N,3,32,32] dataset required");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  SEIBW_CHECK(f.good(), "cannot open for write: " + path);
  const std::size_t kPixels = 3072;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const unsigned char label = static_cast<unsigned char>(ds.labels[i]);
    f.put(static_cast<char>(label));
    for (std::size_t j = 0; j < kPixels; ++j) {
      const float v = ds.samples[i * kPixels + j] * 255.0f;
      f.put(static_cast<char>(static_cast<unsigned char>(std::lround(v))));
    }
  }
}

Dataset load_tensor_dataset(const std::string& path) {
  auto records = read_container(path);
  const Tensor* labels = find_record(records, "labels");
  SEIBW_CHECK_FORMAT(labels && labels->rank() == 1, "tensor dataset: record 'labels' [N] required");

  Dataset ds;
  if (const Tensor* frames = find_record(records, "frames")) {
    SEIBW_CHECK_FORMAT(frames->rank() == 5, "tensor dataset: 'frames' must be [T,N,C,H,W]");
    ds.samples = *frames;
    ds.temporal = true;
  } else if (const Tensor* samples = find_record(records, "samples")) {
    SEIBW_CHECK_FORMAT(samples->rank() == 4, "tensor dataset: 'samples' must be [N,C,H,W]");
    ds.samples = *samples;
  } else {
    throw FormatError("tensor dataset: no 'frames' or 'samples' record in " + path);
  }
  ds.labels.resize(labels->numel());
  std::int32_t max_label = 0;
  for (std::size_t i = 0; i < labels->numel(); ++i) {
    ds.labels[i] = static_cast<std::int32_t>((*labels)[i]);
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.num_classes = static_cast<std::size_t>(max_label) + 1;
  ds.validate();
  return ds;
}

template <class T>
void normalize(DatasetT<T>& ds) {
  const std::size_t C = ds.channels();
  const std::size_t N = ds.samples.numel();
  const std::size_t S = ds.temporal ? ds.samples.dim(3) * ds.samples.dim(4)
                                    : ds.samples.dim(2) * ds.samples.dim(3);
  std::vector<T> mean(C), stddev(C);
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0, count = 0.0;
    for (std::size_t i = c * S; i < N; i += C * S)
      for (std::size_t j = 0; j < S; ++j) {
        s += static_cast<double>(ds.samples[i + j]);
        count += 1.0;
      }
    const double mu = s / count;
    double ss = 0.0;
    for (std::size_t i = c * S; i < N; i += C * S)
      for (std::size_t j = 0; j < S; ++j) {
        const double d = static_cast<double>(ds.samples[i + j]) - mu;
        ss += d * d;
      }
    double sd = std::sqrt(ss / count);
    if (sd < 1e-8) sd = 1.0;
    mean[c] = static_cast<T>(mu);
    stddev[c] = static_cast<T>(sd);
  }
  apply_normalization(ds, mean, stddev);
}

template <class T>
void apply_normalization(DatasetT<T>& ds, const std::vector<T>& mean,
                         const std::vector<T>& stddev) {
  const std::size_t C = ds.channels();
  SEIBW_CHECK_VALUE(mean.size() == C && stddev.size() == C,
                    "normalize: per-channel stats size mismatch");
  const std::size_t S = ds.temporal ? ds.samples.dim(3) * ds.samples.dim(4)
                                    : ds.samples.dim(2) * ds.samples.dim(3);
  const std::size_t N = ds.samples.numel();
  for (std::size_t c = 0; c < C; ++c) {
    const T m = mean[c];
    const T inv = T(1) / stddev[c];
    for (std::size_t i = c * S; i < N; i += C * S)
      for (std::size_t j = 0; j < S; ++j) ds.samples[i + j] = (ds.samples[i + j] - m) * inv;
  }
  ds.norm_mean = mean;
  ds.norm_std = stddev;
}

template <class T>
TensorT<T> direct_encode(const TensorT<T>& sample, std::size_t horizon) {
  SEIBW_CHECK_VALUE(horizon >= 1, "direct_encode: horizon must be >= 1");
  std::vector<std::size_t> shape;
  shape.push_back(horizon);
  for (auto d : sample.shape()) shape.push_back(d);
  TensorT<T> out(shape);
  const std::size_t n = sample.numel();
  for (std::size_t t = 0; t < horizon; ++t)
    std::copy(sample.data(), sample.data() + n, out.data() + t * n);
  return out;
}

template <class T>
TensorT<T> augment(const TensorT<T>& sample, const AugmentSpec& spec, Rng& rng) {
  SEIBW_CHECK_DIM(sample.rank() == 3, "augment: [C,H,W] sample required");
  const std::size_t C = sample.dim(0), H = sample.dim(1), W = sample.dim(2);
  TensorT<T> out = sample;

  if (spec.pad_crop > 0) {
    const std::size_t p = spec.pad_crop;
    const std::size_t oy = static_cast<std::size_t>(rng.uniform_index(2 * p + 1));
    const std::size_t ox = static_cast<std::size_t>(rng.uniform_index(2 * p + 1));
    TensorT<T> crop({C, H, W});
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + oy) -
                                    static_cast<std::ptrdiff_t>(p);
          const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x + ox) -
                                    static_cast<std::ptrdiff_t>(p);
          T v = T(0);
          if (sy >= 0 && sy < static_cast<std::ptrdiff_t>(H) && sx >= 0 &&
              sx < static_cast<std::ptrdiff_t>(W))
            v = out[(c * H + sy) * W + sx];
          crop[(c * H + y) * W + x] = v;
        }
    out = std::move(crop);
  }

  if (spec.hflip && rng.bernoulli(0.5)) {
    TensorT<T> flip({C, H, W});
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
          flip[(c * H + y) * W + x] = out[(c * H + y) * W + (W - 1 - x)];
    out = std::move(flip);
  }

  if (spec.cutout && *spec.cutout > 0) {
    const std::size_t k = *spec.cutout;
    const std::size_t cy = static_cast<std::size_t>(rng.uniform_index(H));
    const std::size_t cx = static_cast<std::size_t>(rng.uniform_index(W));
    const std::ptrdiff_t y0 = static_cast<std::ptrdiff_t>(cy) - static_cast<std::ptrdiff_t>(k / 2);
    const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(cx) - static_cast<std::ptrdiff_t>(k / 2);
    for (std::size_t c = 0; c < C; ++c)
      for (std::ptrdiff_t y = std::max<std::ptrdiff_t>(0, y0);
           y < std::min<std::ptrdiff_t>(H, y0 + static_cast<std::ptrdiff_t>(k)); ++y)
        for (std::ptrdiff_t x = std::max<std::ptrdiff_t>(0, x0);
             x < std::min<std::ptrdiff_t>(W, x0 + static_cast<std::ptrdiff_t>(k)); ++x)
          out[(c * H + y) * W + x] = T(0);
  }
  return out;
}

template <class T>
std::pair<DatasetT<T>, DatasetT<T>> split_dataset(const DatasetT<T>& ds, double val_fraction,
                                                  std::uint64_t seed) {
  SEIBW_CHECK_VALUE(!ds.temporal, "split_dataset: temporal datasets not supported");
  SEIBW_CHECK_VALUE(val_fraction >= 0.0 && val_fraction < 1.0,
                    "split_dataset: fraction must be in [0, 1)");
  const std::size_t n = ds.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i)
    std::swap(order[i - 1], order[rng.uniform_index(i)]);

  const std::size_t n_val = static_cast<std::size_t>(val_fraction * static_cast<double>(n));
  const std::size_t n_train = n - n_val;
  const std::size_t per = ds.samples.numel() / n;

  auto gather = [&](std::size_t lo, std::size_t hi) {
    DatasetT<T> out;
    std::vector<std::size_t> shape = ds.samples.shape();
    shape[0] = hi - lo;
    out.samples = TensorT<T>(shape);
    out.labels.resize(hi - lo);
    out.num_classes = ds.num_classes;
    out.norm_mean = ds.norm_mean;
    out.norm_std = ds.norm_std;
    for (std::size_t i = lo; i < hi; ++i) {
      const std::size_t src = order[i];
      std::copy(ds.samples.data() + src * per, ds.samples.data() + (src + 1) * per,
                out.samples.data() + (i - lo) * per);
      out.labels[i - lo] = ds.labels[src];
    }
    return out;
  };
  return {gather(0, n_train), gather(n_train, n)};
}

BatchIterator::BatchIterator(std::size_t n, std::size_t batch_size, Rng& rng, bool shuffle)
    : n_(n), batch_size_(batch_size) {
  SEIBW_CHECK_VALUE(batch_size >= 1, "batch iterator: batch size must be >= 1");
  order_.resize(n);
  for (std::size_t i = 0; i < n; ++i) order_[i] = i;
  if (shuffle)
    for (std::size_t i = n; i > 1; --i)
      std::swap(order_[i - 1], order_[rng.uniform_index(i)]);
}

bool BatchIterator::next(std::vector<std::size_t>& indices) {
  if (pos_ >= n_) return false;
  const std::size_t hi = std::min(n_, pos_ + batch_size_);
  indices.assign(order_.begin() + pos_, order_.begin() + hi);
  pos_ = hi;
  return true;
}

template <class T>
DatasetT<T> make_synthetic_images(std::size_t n, std::size_t classes, std::size_t channels,
                                  std::size_t height, std::size_t width, Rng& rng) {
  SEIBW_CHECK_VALUE(classes >= 2, "synthetic images: at least 2 classes");
  DatasetT<T> ds;
  ds.samples = TensorT<T>({n, channels, height, width});
  ds.labels.resize(n);
  ds.num_classes = classes;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t y = rng.uniform_index(classes);
    ds.labels[i] = static_cast<std::int32_t>(y);
    // Blob center on a per-class grid position, jittered.
    const double angle = 2.0 * 3.14159265358979323846 * static_cast<double>(y) /
                         static_cast<double>(classes);
    const double r = 0.3;
    const double cy = 0.5 + r * std::sin(angle) + 0.05 * rng.normal();
    const double cx = 0.5 + r * std::cos(angle) + 0.05 * rng.normal();
    const double sigma = 0.12 * static_cast<double>(height);
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t py = 0; py < height; ++py)
        for (std::size_t px = 0; px < width; ++px) {
          const double dy = static_cast<double>(py) - cy * static_cast<double>(height);
          const double dx = static_cast<double>(px) - cx * static_cast<double>(width);
          const double blob = std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
          const double noise = 0.15 * rng.normal();
          ds.samples[((i * channels + c) * height + py) * width + px] =
              static_cast<T>(blob + noise);
        }
  }
  return ds;
}

#define SEIBW_INSTANTIATE(T)                                                              \
  template struct DatasetT<T>;                                                            \
  template void normalize<T>(DatasetT<T>&);                                               \
  template void apply_normalization<T>(DatasetT<T>&, const std::vector<T>&,               \
                                       const std::vector<T>&);                            \
  template TensorT<T> direct_encode<T>(const TensorT<T>&, std::size_t);                   \
  template TensorT<T> augment<T>(const TensorT<T>&, const AugmentSpec&, Rng&);            \
  template std::pair<DatasetT<T>, DatasetT<T>> split_dataset<T>(const DatasetT<T>&,       \
                                                                double, std::uint64_t);   \
  template DatasetT<T> make_synthetic_images<T>(std::size_t, std::size_t, std::size_t,    \
                                                std::size_t, std::size_t, Rng&);

SEIBW_INSTANTIATE(float)
SEIBW_INSTANTIATE(double)
#undef SEIBW_INSTANTIATE

}  // namespace seibw
