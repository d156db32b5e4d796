#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gbnlab/tensor.hpp"

namespace gbnlab {

struct Dataset {
  Tensor images;  // n x 1 x rows x cols for IDX data, n x d for synthetic data
  std::vector<int> labels;
  std::string name;

  std::size_t size() const { return labels.size(); }
  // Rows [begin, begin + count), clipped to the dataset.
  Dataset head(std::size_t count, std::size_t begin = 0) const;
};

/// Reads an IDX image/label pair (MNIST layout). Pixels are scaled by 1/255.
Dataset read_idx(const std::filesystem::path& images_path,
                 const std::filesystem::path& labels_path);

/// Serializes a dataset back to IDX bytes; pixel values are rounded to the
/// nearest byte. Used for fixtures.
void write_idx(const Dataset& ds, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path);

/// Gaussian blobs around separation * e_c (sigma 1), mapped affinely to
/// [0, 1] and clamped. Class-major order with an exactly uniform histogram.
Dataset synth_blobs(std::size_t num_classes, std::size_t num_per_class, std::size_t dim,
                    double separation, std::uint64_t seed);

struct Batch {
  Tensor x;
  std::vector<int> labels;
  std::vector<std::size_t> indices;
};

/// Seeded permutation per (seed, epoch), cut into batch_size chunks. A
/// trailing chunk with fewer than two samples is dropped.
std::vector<Batch> batches(const Dataset& ds, std::size_t batch_size, std::uint64_t seed,
                           std::uint64_t epoch);

/// Gathers the given rows of ds.
Batch gather(const Dataset& ds, const std::vector<std::size_t>& indices);

}  // namespace gbnlab
