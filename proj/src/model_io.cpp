#include "intrafusion/model_io.hpp"

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "intrafusion/errors.hpp"
#include "intrafusion/rng.hpp"
#include "json.hpp"

namespace intrafusion {

using nlohmann::json;

namespace {

std::size_t uz(int v) { return static_cast<std::size_t>(v); }

void append_le_floats(std::string& out, const std::vector<float>& values) {
  const std::size_t start = out.size();
  out.resize(start + values.size() * 4);
  char* dst = out.data() + start;
  for (float v : values) {
    auto bits = std::bit_cast<std::uint32_t>(v);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    std::memcpy(dst, &bits, 4);
    dst += 4;
  }
}

std::vector<float> read_le_floats(const char* src, std::size_t count) {
  std::vector<float> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, src + 4 * i, 4);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    out[i] = std::bit_cast<float>(bits);
  }
  return out;
}

template <typename T>
T get_field(const json& j, const char* key) {
  if (!j.contains(key)) throw FormatError(std::string("model header is missing '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("model header field '") + key + "': " + e.what());
  }
}

std::vector<std::uint8_t> read_maybe_gzip(const std::filesystem::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw FormatError("cannot open " + path.string());
  std::vector<std::uint8_t> out;
  std::uint8_t buf[1 << 15];
  int n;
  while ((n = gzread(f, buf, sizeof(buf))) > 0) out.insert(out.end(), buf, buf + n);
  const bool failed = n < 0;
  gzclose(f);
  if (failed) throw FormatError("failed to decompress " + path.string());
  return out;
}

std::uint32_t be32(const std::uint8_t* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | std::uint32_t{p[3]};
}

}  // namespace

// ---- model files -------------------------------------------------------------

std::string serialize_model(const ModelGraph& model) {
  model.validate();
  json header;
  header["format"] = "ifm";
  header["version"] = kModelFormatVersion;
  header["input"] = model.input_id;
  header["output"] = model.output_id;
  json nodes = json::array();
  std::string payload;
  for (const auto& n : model.nodes) {
    json jn;
    jn["id"] = n.id;
    jn["kind"] = kind_name(n.kind);
    jn["inputs"] = n.inputs;
    jn["in_channels"] = n.in_channels;
    jn["out_channels"] = n.out_channels;
    jn["kernel"] = n.kernel;
    jn["stride"] = n.stride;
    jn["padding"] = n.padding;
    jn["window"] = n.window;
    jn["eps"] = static_cast<double>(n.eps);
    jn["input_shape"] = n.input_shape;
    json params = json::array();
    for (const auto& p : n.params) {
      params.push_back({{"name", p.name}, {"shape", p.value.shape()}, {"bytes", p.value.numel() * 4}});
      append_le_floats(payload, p.value.values());
    }
    jn["params"] = std::move(params);
    nodes.push_back(std::move(jn));
  }
  header["nodes"] = std::move(nodes);
  const std::string text = header.dump() + "\n";
  return std::to_string(text.size()) + "\n" + text + payload;
}

ModelGraph deserialize_model(std::string_view bytes) {
  const std::size_t nl = bytes.find('\n');
  if (nl == std::string_view::npos || nl == 0 || nl > 20) throw FormatError("model file has no header length line");
  std::size_t header_len = 0;
  for (char c : bytes.substr(0, nl)) {
    if (c < '0' || c > '9') throw FormatError("model header length is not a decimal number");
    header_len = header_len * 10 + static_cast<std::size_t>(c - '0');
  }
  if (bytes.size() < nl + 1 + header_len) throw FormatError("model file truncated inside the header");
  const std::string_view text = bytes.substr(nl + 1, header_len);
  if (text.empty() || text.back() != '\n') throw FormatError("model header is not newline-terminated");
  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("model header is not valid JSON: ") + e.what());
  }
  if (get_field<std::string>(header, "format") != "ifm") throw FormatError("not an ifm model file");
  const int version = get_field<int>(header, "version");
  if (version != kModelFormatVersion) {
    throw FormatError("unsupported model file version " + std::to_string(version) + " (expected " +
                      std::to_string(kModelFormatVersion) + ")");
  }
  ModelGraph model;
  model.input_id = get_field<std::string>(header, "input");
  model.output_id = get_field<std::string>(header, "output");
  const std::string_view payload = bytes.substr(nl + 1 + header_len);
  std::size_t offset = 0;
  for (const auto& jn : get_field<json>(header, "nodes")) {
    LayerNode n;
    n.id = get_field<std::string>(jn, "id");
    n.kind = parse_kind(get_field<std::string>(jn, "kind"));
    n.inputs = get_field<std::vector<std::string>>(jn, "inputs");
    n.in_channels = get_field<int>(jn, "in_channels");
    n.out_channels = get_field<int>(jn, "out_channels");
    n.kernel = get_field<int>(jn, "kernel");
    n.stride = get_field<int>(jn, "stride");
    n.padding = get_field<int>(jn, "padding");
    n.window = get_field<int>(jn, "window");
    n.eps = static_cast<float>(get_field<double>(jn, "eps"));
    n.input_shape = get_field<Shape>(jn, "input_shape");
    for (const auto& jp : get_field<json>(jn, "params")) {
      const auto name = get_field<std::string>(jp, "name");
      const auto shape = get_field<Shape>(jp, "shape");
      const auto declared = get_field<std::size_t>(jp, "bytes");
      const std::size_t count = shape_numel(shape);
      if (declared != count * 4) {
        throw FormatError("length error: parameter " + n.id + "." + name + " declares " + std::to_string(declared) +
                          " bytes but shape " + shape_str(shape) + " needs " + std::to_string(count * 4));
      }
      if (offset + declared > payload.size()) {
        throw FormatError("truncated payload: parameter " + n.id + "." + name + " runs past end of file");
      }
      n.params.push_back({name, Tensor(shape, read_le_floats(payload.data() + offset, count))});
      offset += declared;
    }
    model.nodes.push_back(std::move(n));
  }
  if (offset != payload.size()) {
    throw FormatError("length error: payload has " + std::to_string(payload.size() - offset) + " trailing bytes");
  }
  model.validate();
  return model;
}

void save_model(const ModelGraph& model, const std::filesystem::path& path) {
  const std::string bytes = serialize_model(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("failed writing " + path.string());
}

ModelGraph load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_model(ss.str());
}

// ---- datasets -------------------------------------------------------------------

Shape Dataset::sample_shape() const { return Shape(features.shape().begin() + 1, features.shape().end()); }

std::size_t Dataset::sample_numel() const { return size() == 0 ? shape_numel(sample_shape()) : features.numel() / size(); }

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.classes = classes;
  const std::size_t per = sample_numel();
  Shape shape = features.shape();
  shape[0] = static_cast<int>(indices.size());
  std::vector<float> data;
  data.reserve(indices.size() * per);
  out.labels.reserve(indices.size());
  for (std::size_t i : indices) {
    if (i >= size()) throw InputError("dataset index out of range");
    auto src = features.data().subspan(i * per, per);
    data.insert(data.end(), src.begin(), src.end());
    out.labels.push_back(labels[i]);
  }
  if (indices.empty()) {
    out.features = Tensor();
    return out;
  }
  out.features = Tensor(shape, std::move(data));
  return out;
}

Dataset Dataset::slice(std::size_t begin, std::size_t count) const {
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = begin + i;
  return subset(idx);
}

IdxArray parse_idx(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw FormatError("IDX data too short for magic number");
  IdxArray a;
  a.magic = be32(bytes.data());
  if (bytes[0] != 0 || bytes[1] != 0) throw FormatError("IDX magic mismatch");
  if (bytes[2] != 0x08) throw FormatError("IDX payload type is not unsigned byte");
  const int rank = bytes[3];
  if (rank < 1 || rank > 4) throw FormatError("IDX magic mismatch: unsupported rank");
  if (bytes.size() < 4 + 4 * uz(rank)) throw FormatError("IDX data truncated in dimensions");
  std::size_t count = 1;
  for (int d = 0; d < rank; ++d) {
    const std::uint32_t v = be32(bytes.data() + 4 + 4 * d);
    if (v == 0 || v > (1u << 30)) throw FormatError("IDX dimension out of range");
    a.dims.push_back(static_cast<int>(v));
    count *= v;
  }
  const std::size_t start = 4 + 4 * uz(rank);
  if (bytes.size() != start + count) {
    throw FormatError("IDX payload has " + std::to_string(bytes.size() - start) + " bytes, expected " +
                      std::to_string(count));
  }
  a.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(start), bytes.end());
  return a;
}

IdxArray read_idx(const std::filesystem::path& path) { return parse_idx(read_maybe_gzip(path)); }

Dataset load_idx_split(const std::filesystem::path& images, const std::filesystem::path& labels) {
  IdxArray img = read_idx(images);
  IdxArray lab = read_idx(labels);
  if (img.magic != 0x00000803) throw FormatError("IDX magic mismatch: " + images.string() + " is not an image file");
  if (lab.magic != 0x00000801) throw FormatError("IDX magic mismatch: " + labels.string() + " is not a label file");
  if (img.dims[0] != lab.dims[0]) throw FormatError("IDX image/label counts differ");
  Dataset d;
  std::vector<float> data(img.data.size());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(img.data[i]) / 255.0f;
  d.features = Tensor({img.dims[0], 1, img.dims[1], img.dims[2]}, std::move(data));
  d.labels.assign(lab.data.begin(), lab.data.end());
  for (int l : d.labels) d.classes = std::max(d.classes, l + 1);
  return d;
}

namespace {

bool parse_float(const std::string& s, float& out) {
  if (s.empty()) return false;
  char* end = nullptr;
  out = std::strtof(s.c_str(), &end);
  return end && *end == '\0';
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r' && c != ' ' && c != '\t') {
      cur.push_back(c);
    }
  }
  fields.push_back(cur);
  return fields;
}

}  // namespace

Dataset load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<float> data;
  std::vector<int> labels;
  std::size_t width = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    auto fields = split_csv_line(line);
    std::vector<float> row(fields.size());
    bool numeric = true;
    for (std::size_t i = 0; i < fields.size(); ++i) numeric = numeric && parse_float(fields[i], row[i]);
    if (!numeric) {
      if (labels.empty() && width == 0 && line_no == 1) continue;  // header row
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": non-numeric field");
    }
    if (fields.size() < 2) throw FormatError(path.string() + ":" + std::to_string(line_no) + ": need features and a label");
    if (width == 0) width = fields.size();
    if (fields.size() != width) {
      throw FormatError("ragged CSV row at " + path.string() + ":" + std::to_string(line_no) + " (" +
                        std::to_string(fields.size()) + " fields, expected " + std::to_string(width) + ")");
    }
    const float label = row.back();
    if (label < 0 || label != std::floor(label)) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": label must be a non-negative integer");
    }
    labels.push_back(static_cast<int>(label));
    data.insert(data.end(), row.begin(), row.end() - 1);
  }
  if (labels.empty()) throw FormatError(path.string() + " contains no rows");
  Dataset d;
  d.features = Tensor({static_cast<int>(labels.size()), static_cast<int>(width - 1)}, std::move(data));
  d.labels = std::move(labels);
  for (int l : d.labels) d.classes = std::max(d.classes, l + 1);
  return d;
}

void apply_normalization(Dataset& data, const Normalization& norm) {
  const std::size_t per = data.sample_numel();
  for (const auto* v : {&norm.offset, &norm.scale}) {
    if (v->size() > 1 && v->size() != per) {
      throw InputError("normalization has " + std::to_string(v->size()) + " entries for " + std::to_string(per) +
                       " features");
    }
  }
  if (norm.offset.empty() && norm.scale.empty()) return;
  auto pick = [](const std::vector<float>& v, std::size_t f, float dflt) {
    return v.empty() ? dflt : v.size() == 1 ? v[0] : v[f];
  };
  for (std::size_t i = 0; i < data.features.numel(); ++i) {
    const std::size_t f = i % per;
    data.features[i] = (data.features[i] - pick(norm.offset, f, 0.0f)) * pick(norm.scale, f, 1.0f);
  }
}

DatasetSource idx_directory_source(const std::filesystem::path& dir) {
  auto find = [&](const std::string& stem) {
    for (const std::string& name : {stem, stem + ".gz"}) {
      if (std::filesystem::exists(dir / name)) return dir / name;
    }
    throw FormatError("missing " + stem + "[.gz] in " + dir.string());
  };
  DatasetSource s;
  s.kind = DatasetKind::kIdx;
  s.train_features = find("train-images-idx3-ubyte");
  s.train_labels = find("train-labels-idx1-ubyte");
  s.test_features = find("t10k-images-idx3-ubyte");
  s.test_labels = find("t10k-labels-idx1-ubyte");
  return s;
}

DatasetSource source_from_path(const std::filesystem::path& path) {
  if (std::filesystem::is_directory(path)) return idx_directory_source(path);
  DatasetSource s;
  s.kind = DatasetKind::kCsv;
  s.train_features = path;
  return s;
}

std::pair<Dataset, Dataset> load_dataset(const DatasetSource& source) {
  Dataset train, test;
  if (source.kind == DatasetKind::kIdx) {
    train = load_idx_split(source.train_features, source.train_labels);
    test = load_idx_split(source.test_features, source.test_labels);
  } else {
    train = load_csv(source.train_features);
    if (!source.test_features.empty()) {
      test = load_csv(source.test_features);
    } else {
      if (source.test_fraction < 0.0 || source.test_fraction >= 1.0) throw InputError("test_fraction must be in [0,1)");
      const auto n_test = static_cast<std::size_t>(std::llround(source.test_fraction * static_cast<double>(train.size())));
      Dataset all = std::move(train);
      train = all.slice(0, all.size() - n_test);
      test = all.slice(all.size() - n_test, n_test);
    }
    if (test.size() > 0 && test.sample_shape() != train.sample_shape()) {
      throw FormatError("train and test feature counts differ");
    }
  }
  const int classes = std::max(train.classes, test.classes);
  train.classes = test.classes = classes;
  apply_normalization(train, source.normalization);
  if (test.size() > 0) apply_normalization(test, source.normalization);
  return {std::move(train), std::move(test)};
}

std::uint64_t dataset_hash(const Dataset& data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (int d : data.features.shape()) mix(&d, sizeof d);
  mix(data.features.data().data(), data.features.numel() * sizeof(float));
  mix(data.labels.data(), data.labels.size() * sizeof(int));
  return h;
}

// ---- parameter counting ------------------------------------------------------------

ParamCount count_params(const ModelGraph& model) {
  ParamCount c;
  for (const auto& n : model.nodes) {
    std::int64_t layer = 0;
    for (const auto& p : n.params) layer += static_cast<std::int64_t>(p.value.numel());
    if (!n.params.empty()) c.per_layer[n.id] = layer;
    c.total += layer;
  }
  return c;
}

// ---- builders --------------------------------------------------------------------------

ModelGraph build_mlp(const ArchDims& dims) {
  if (dims.input.empty() || dims.classes < 1) throw InputError("mlp: invalid dims");
  for (int w : dims.widths) {
    if (w < 1) throw InputError("mlp: hidden widths must be positive");
  }
  ModelGraph m;
  m.input_id = "input";
  m.nodes.push_back(make_input("input", dims.input));
  std::string prev = "input";
  if (dims.input.size() > 1) {
    m.nodes.push_back(make_flatten("flatten", prev));
    prev = "flatten";
  }
  int features = static_cast<int>(shape_numel(dims.input));
  for (std::size_t i = 0; i < dims.widths.size(); ++i) {
    const std::string k = std::to_string(i + 1);
    m.nodes.push_back(make_linear("fc" + k, prev, features, dims.widths[i]));
    prev = "fc" + k;
    if (dims.batchnorm) {
      m.nodes.push_back(make_batchnorm("bn" + k, prev, dims.widths[i]));
      prev = "bn" + k;
    }
    m.nodes.push_back(make_relu("relu" + k, prev));
    prev = "relu" + k;
    features = dims.widths[i];
  }
  m.nodes.push_back(make_linear("fc_out", prev, features, dims.classes));
  m.output_id = "fc_out";
  m.validate();
  return m;
}

ModelGraph build_vgg_toy(const ArchDims& dims) {
  if (dims.input.size() != 3 || dims.widths.empty() || dims.classes < 1) throw InputError("vgg-toy: invalid dims");
  ModelGraph m;
  m.input_id = "input";
  m.nodes.push_back(make_input("input", dims.input));
  std::string prev = "input";
  int ch = dims.input[0], h = dims.input[1], w = dims.input[2];
  for (std::size_t i = 0; i < dims.widths.size(); ++i) {
    const std::string k = std::to_string(i + 1);
    if (dims.widths[i] < 1 || h < 2 || w < 2) throw InputError("vgg-toy: invalid dims for block " + k);
    m.nodes.push_back(make_conv2d("conv" + k, prev, ch, dims.widths[i], 3, 1, 1));
    m.nodes.push_back(make_batchnorm("bn" + k, "conv" + k, dims.widths[i]));
    m.nodes.push_back(make_relu("relu" + k, "bn" + k));
    m.nodes.push_back(make_maxpool("pool" + k, "relu" + k, 2));
    prev = "pool" + k;
    ch = dims.widths[i];
    h /= 2;
    w /= 2;
  }
  m.nodes.push_back(make_flatten("flatten", prev));
  m.nodes.push_back(make_linear("fc", "flatten", ch * h * w, dims.classes));
  m.output_id = "fc";
  m.validate();
  return m;
}

ModelGraph build_resnet_toy(const ArchDims& dims) {
  if (dims.input.size() != 3 || dims.widths.size() != 1 || dims.widths[0] < 1 || dims.classes < 1 ||
      dims.input[1] < 4 || dims.input[2] < 4) {
    throw InputError("resnet-toy: needs input [C,H,W] with H,W >= 4 and a single width");
  }
  const int c = dims.widths[0];
  const int h = dims.input[1] / 2 / 2, w = dims.input[2] / 2 / 2;
  ModelGraph m;
  m.input_id = "input";
  m.nodes.push_back(make_input("input", dims.input));
  m.nodes.push_back(make_conv2d("stem_conv", "input", dims.input[0], c, 3, 1, 1));
  m.nodes.push_back(make_batchnorm("stem_bn", "stem_conv", c));
  m.nodes.push_back(make_relu("stem_relu", "stem_bn"));
  m.nodes.push_back(make_maxpool("stem_pool", "stem_relu", 2));
  m.nodes.push_back(make_conv2d("block_conv1", "stem_pool", c, c, 3, 1, 1));
  m.nodes.push_back(make_batchnorm("block_bn1", "block_conv1", c));
  m.nodes.push_back(make_relu("block_relu1", "block_bn1"));
  m.nodes.push_back(make_conv2d("block_conv2", "block_relu1", c, c, 3, 1, 1));
  m.nodes.push_back(make_batchnorm("block_bn2", "block_conv2", c));
  m.nodes.push_back(make_add("block_add", "block_bn2", "stem_pool"));
  m.nodes.push_back(make_relu("block_relu2", "block_add"));
  m.nodes.push_back(make_conv2d("down_conv", "block_relu2", c, 2 * c, 3, 1, 1));
  m.nodes.push_back(make_batchnorm("down_bn", "down_conv", 2 * c));
  m.nodes.push_back(make_relu("down_relu", "down_bn"));
  m.nodes.push_back(make_maxpool("down_pool", "down_relu", 2));
  m.nodes.push_back(make_flatten("flatten", "down_pool"));
  m.nodes.push_back(make_linear("fc", "flatten", 2 * c * h * w, dims.classes));
  m.output_id = "fc";
  m.validate();
  return m;
}

ModelGraph build_arch(std::string_view name, const ArchDims& dims, std::uint64_t seed) {
  ModelGraph m;
  if (name == "mlp") {
    m = build_mlp(dims);
  } else if (name == "vgg-toy") {
    m = build_vgg_toy(dims);
  } else if (name == "resnet-toy") {
    m = build_resnet_toy(dims);
  } else {
    throw InputError("unknown architecture '" + std::string(name) + "' (mlp, vgg-toy, resnet-toy)");
  }
  init_params(m, seed);
  return m;
}

void init_params(ModelGraph& model, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& n : model.nodes) {
    if (!n.is_affine()) continue;
    const double fan_in = n.kind == LayerKind::kLinear ? n.in_channels : double(n.in_channels) * n.kernel * n.kernel;
    const double wb = std::sqrt(6.0 / fan_in);
    const double bb = 1.0 / std::sqrt(fan_in);
    for (float& v : n.param("weight").values()) v = static_cast<float>(rng.uniform(-wb, wb));
    if (Tensor* b = n.find_param("bias")) {
      for (float& v : b->values()) v = static_cast<float>(rng.uniform(-bb, bb));
    }
  }
}

void randomize_batchnorm(ModelGraph& model, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& n : model.nodes) {
    if (n.kind != LayerKind::kBatchNorm) continue;
    for (float& v : n.param("gamma").values()) v = static_cast<float>(rng.uniform(0.5, 1.5));
    for (float& v : n.param("beta").values()) v = static_cast<float>(rng.uniform(-0.5, 0.5));
    for (float& v : n.param("running_mean").values()) v = static_cast<float>(rng.uniform(-0.5, 0.5));
    for (float& v : n.param("running_var").values()) v = static_cast<float>(rng.uniform(0.5, 2.0));
  }
}

}  // namespace intrafusion
