#include "gbnlab/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>

#include "gbnlab/error.hpp"
#include "gbnlab/rng.hpp"

namespace gbnlab {

namespace {

constexpr std::uint32_t kImageMagic = 2051;
constexpr std::uint32_t kLabelMagic = 2049;

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char>& bytes, std::size_t offset,
                   const std::filesystem::path& path) {
  if (bytes.size() < offset + 4) {
    throw LengthError(path.string() + ": truncated header (" + std::to_string(bytes.size()) +
                      " bytes)");
  }
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void put_be32(std::ofstream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                         static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(bytes, 4);
}

}  // namespace

Dataset Dataset::head(std::size_t count, std::size_t begin) const {
  begin = std::min(begin, size());
  count = std::min(count, size() - begin);
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), begin);
  Batch b = gather(*this, idx);
  return Dataset{b.x, b.labels, name};
}

Dataset read_idx(const std::filesystem::path& images_path,
                 const std::filesystem::path& labels_path) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);

  const std::uint32_t img_magic = be32(img, 0, images_path);
  if (img_magic != kImageMagic) {
    throw FormatError(images_path.string() + ": image magic " + std::to_string(img_magic) +
                      ", expected 2051");
  }
  const std::uint32_t lab_magic = be32(lab, 0, labels_path);
  if (lab_magic != kLabelMagic) {
    throw FormatError(labels_path.string() + ": label magic " + std::to_string(lab_magic) +
                      ", expected 2049");
  }
  const std::size_t n = be32(img, 4, images_path);
  const std::size_t rows = be32(img, 8, images_path);
  const std::size_t cols = be32(img, 12, images_path);
  const std::size_t n_labels = be32(lab, 4, labels_path);
  if (n != n_labels) {
    throw ConsistencyError(std::to_string(n) + " images but " + std::to_string(n_labels) +
                           " labels");
  }
  if (img.size() < 16 + n * rows * cols) {
    throw LengthError(images_path.string() + ": expected " + std::to_string(16 + n * rows * cols) +
                      " bytes, found " + std::to_string(img.size()));
  }
  if (lab.size() < 8 + n) {
    throw LengthError(labels_path.string() + ": expected " + std::to_string(8 + n) +
                      " bytes, found " + std::to_string(lab.size()));
  }

  Dataset ds;
  ds.name = images_path.filename().string();
  std::vector<double> pixels(n * rows * cols);
  for (std::size_t i = 0; i < pixels.size(); ++i) pixels[i] = img[16 + i] / 255.0;
  ds.images = Tensor({n, 1, rows, cols}, std::move(pixels));
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) ds.labels[i] = lab[8 + i];
  return ds;
}

void write_idx(const Dataset& ds, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path) {
  const auto& shape = ds.images.shape();
  if (shape.size() != 4 || shape[1] != 1) {
    throw DimensionError("write_idx expects n x 1 x rows x cols, got " + shape_to_string(shape));
  }
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lab(labels_path, std::ios::binary);
  if (!img) throw IoError("cannot write " + images_path.string());
  if (!lab) throw IoError("cannot write " + labels_path.string());
  put_be32(img, kImageMagic);
  put_be32(img, static_cast<std::uint32_t>(shape[0]));
  put_be32(img, static_cast<std::uint32_t>(shape[2]));
  put_be32(img, static_cast<std::uint32_t>(shape[3]));
  for (double v : ds.images.data()) {
    img.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255))));
  }
  put_be32(lab, kLabelMagic);
  put_be32(lab, static_cast<std::uint32_t>(ds.size()));
  for (int y : ds.labels) lab.put(static_cast<char>(y));
}

Dataset synth_blobs(std::size_t num_classes, std::size_t num_per_class, std::size_t dim,
                    double separation, std::uint64_t seed) {
  if (!(separation > 0.0)) throw UsageError("synth_blobs: separation must be > 0");
  if (num_classes == 0 || num_classes > dim) {
    throw UsageError("synth_blobs: need 1 <= num_classes <= dim");
  }
  constexpr double sigma = 1.0;
  const double lo = -4.0 * sigma;
  const double span = separation + 8.0 * sigma;
  Rng rng(derive_seed(seed, {0x5b}));
  const std::size_t n = num_classes * num_per_class;
  std::vector<double> values(n * dim);
  Dataset ds;
  ds.name = "blobs";
  ds.labels.reserve(n);
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (std::size_t s = 0; s < num_per_class; ++s) {
      double* row = values.data() + ds.labels.size() * dim;
      for (std::size_t j = 0; j < dim; ++j) {
        const double raw = (j == c ? separation : 0.0) + sigma * standard_normal(rng);
        row[j] = std::clamp((raw - lo) / span, 0.0, 1.0);
      }
      ds.labels.push_back(static_cast<int>(c));
    }
  }
  ds.images = Tensor({n, dim}, std::move(values));
  return ds;
}

Batch gather(const Dataset& ds, const std::vector<std::size_t>& indices) {
  Shape shape = ds.images.shape();
  const std::size_t row = ds.size() ? ds.images.numel() / ds.size() : 0;
  shape[0] = indices.size();
  std::vector<double> values(indices.size() * row);
  std::vector<int> labels(indices.size());
  const auto src = ds.images.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= ds.size()) throw IndexError("sample index out of range");
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(indices[i] * row), row,
                values.begin() + static_cast<std::ptrdiff_t>(i * row));
    labels[i] = ds.labels[indices[i]];
  }
  return Batch{Tensor(shape, std::move(values)), std::move(labels), indices};
}

std::vector<Batch> batches(const Dataset& ds, std::size_t batch_size, std::uint64_t seed,
                           std::uint64_t epoch) {
  if (batch_size < 1) throw UsageError("batch size must be >= 1");
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, {0xba7c, epoch}));
  for (std::size_t i = order.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
    std::swap(order[i - 1], order[std::min(j, i - 1)]);
  }
  std::vector<Batch> out;
  for (std::size_t begin = 0; begin < order.size(); begin += batch_size) {
    const std::size_t end = std::min(begin + batch_size, order.size());
    if (end - begin < 2) break;
    out.push_back(gather(ds, {order.begin() + static_cast<std::ptrdiff_t>(begin),
                              order.begin() + static_cast<std::ptrdiff_t>(end)}));
  }
  return out;
}

}  // namespace gbnlab
