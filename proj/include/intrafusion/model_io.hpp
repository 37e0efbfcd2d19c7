#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "intrafusion/graph.hpp"

namespace intrafusion {

// ---- model files -----------------------------------------------------------
//
// `.ifm` layout: "<N>\n" where N is the byte length of the JSON header that
// follows (including its terminating '\n'), then the header, then every
// parameter as raw little-endian float32 in header declaration order.

inline constexpr int kModelFormatVersion = 1;

std::string serialize_model(const ModelGraph& model);
ModelGraph deserialize_model(std::string_view bytes);
void save_model(const ModelGraph& model, const std::filesystem::path& path);
ModelGraph load_model(const std::filesystem::path& path);

// ---- datasets ---------------------------------------------------------------

// x' = (x - offset) * scale. Each vector is empty (identity), length 1
// (applied to every feature) or one entry per feature.
struct Normalization {
  std::vector<float> offset;
  std::vector<float> scale;
};

enum class DatasetKind { kIdx, kCsv };

struct DatasetSource {
  DatasetKind kind = DatasetKind::kIdx;
  // IDX: image + label files per split. CSV: train_features holds the rows;
  // test_features may name a second file, otherwise the last
  // `test_fraction` of rows form the test split.
  std::filesystem::path train_features;
  std::filesystem::path train_labels;
  std::filesystem::path test_features;
  std::filesystem::path test_labels;
  double test_fraction = 0.2;
  Normalization normalization;
};

// Looks for {train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz] in a directory.
DatasetSource idx_directory_source(const std::filesystem::path& dir);
// A directory is read as IDX, a file as CSV.
DatasetSource source_from_path(const std::filesystem::path& path);

struct Dataset {
  Tensor features;  // [N, ...sample shape]
  std::vector<int> labels;
  int classes = 0;

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const;
  std::size_t sample_numel() const;
  Dataset subset(std::span<const std::size_t> indices) const;
  Dataset slice(std::size_t begin, std::size_t count) const;
};

struct IdxArray {
  std::uint32_t magic = 0;
  std::vector<int> dims;
  std::vector<std::uint8_t> data;
};

// Reads an IDX file (optionally gzip-compressed); only unsigned-byte payloads.
IdxArray read_idx(const std::filesystem::path& path);
IdxArray parse_idx(std::span<const std::uint8_t> bytes);
Dataset load_idx_split(const std::filesystem::path& images, const std::filesystem::path& labels);
Dataset load_csv(const std::filesystem::path& path);
void apply_normalization(Dataset& data, const Normalization& norm);

// (train, test), in file order.
std::pair<Dataset, Dataset> load_dataset(const DatasetSource& source);

std::uint64_t dataset_hash(const Dataset& data);

// ---- parameter counting -----------------------------------------------------

struct ParamCount {
  std::int64_t total = 0;
  std::map<std::string, std::int64_t> per_layer;
};

// Every weight, bias, BN affine parameter and BN running statistic, once.
ParamCount count_params(const ModelGraph& model);

// ---- architecture builders ----------------------------------------------------

struct ArchDims {
  Shape input;              // per-sample input shape
  std::vector<int> widths;  // mlp: hidden sizes; vgg-toy: conv channels; resnet-toy: {width}
  int classes = 10;
  bool batchnorm = false;   // mlp only; conv builders always use BN
};

// Linear stack with ReLU between layers; a leading Flatten when the input is not 1-D.
ModelGraph build_mlp(const ArchDims& dims);
// Per width: conv3x3(pad 1) -> BN -> ReLU -> maxpool2; then flatten -> linear.
ModelGraph build_vgg_toy(const ArchDims& dims);
// conv3x3 stem -> BN -> ReLU -> maxpool2 -> residual block (two conv/BN, Add with
// the stem) -> ReLU -> conv3x3 to 2*width -> BN -> ReLU -> maxpool2 -> flatten -> linear.
ModelGraph build_resnet_toy(const ArchDims& dims);
// name in {mlp, vgg-toy, resnet-toy}; parameters initialised from `seed`.
ModelGraph build_arch(std::string_view name, const ArchDims& dims, std::uint64_t seed);

// Uniform(+-sqrt(6/fan_in)) weights, Uniform(+-1/sqrt(fan_in)) biases, identity BN.
void init_params(ModelGraph& model, std::uint64_t seed);
// Random but valid BN affine parameters and running statistics.
void randomize_batchnorm(ModelGraph& model, std::uint64_t seed);

}  // namespace intrafusion
