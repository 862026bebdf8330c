#include "dupl/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <random>

#include "dupl/error.hpp"

namespace dupl {

int SubNetConfig::output_stride() const {
  int s = 1;
  for (int v : backbone_strides) s *= v;
  return s;
}

void SubNetConfig::validate() const {
  if (num_classes < 1) throw ConfigError("model: need at least one class");
  if (backbone_channels.empty() ||
      backbone_channels.size() != backbone_strides.size()) {
    throw ConfigError("model: backbone channels/strides length mismatch");
  }
  for (std::size_t i = 0; i < backbone_channels.size(); ++i) {
    if (backbone_channels[i] < 1 || backbone_strides[i] < 1) {
      throw ConfigError("model: backbone widths and strides must be positive");
    }
  }
  if (head_channels < 0 || head_dilation < 1) {
    throw ConfigError("model: bad segmentation head settings");
  }
}

std::uint64_t subnet_seed(std::uint64_t seed, int index) {
  // splitmix64 of (seed, index)
  std::uint64_t z = seed * 2 + static_cast<std::uint64_t>(index) + 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

template <typename T>
SubNet<T>::SubNet(const SubNetConfig& config) : config_(config) {
  config_.validate();
  auto add = [this](std::string name, Shape shape) {
    params_.push_back({std::move(name), Tensor<T>::zeros(shape, true)});
  };
  int in = config_.in_channels;
  for (std::size_t i = 0; i < config_.backbone_channels.size(); ++i) {
    const int out = config_.backbone_channels[i];
    add("backbone." + std::to_string(i) + ".weight", Shape{out, in, 3, 3});
    add("backbone." + std::to_string(i) + ".bias", Shape{out});
    in = out;
  }
  const int d = config_.feature_dim();
  classifier_index_ = params_.size();
  add("classifier.weight", Shape{config_.num_classes, d});
  add("classifier.bias", Shape{config_.num_classes});
  const int hc = config_.head_channels > 0 ? config_.head_channels : d;
  add("seg_head.0.weight", Shape{hc, d, 3, 3});
  add("seg_head.0.bias", Shape{hc});
  add("seg_head.1.weight", Shape{hc, hc, 3, 3});
  add("seg_head.1.bias", Shape{hc});
  head_index_ = params_.size();
  add("seg_head.2.weight", Shape{config_.num_classes + 1, hc, 1, 1});
  add("seg_head.2.bias", Shape{config_.num_classes + 1});
}

template <typename T>
void SubNet<T>::init_params(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& p : params_) {
    auto data = p.tensor.data();
    const Shape& s = p.tensor.shape();
    if (s.rank() == 1) {
      std::fill(data.begin(), data.end(), T(0));
      continue;
    }
    const std::size_t fan_in = s.numel() / static_cast<std::size_t>(s[0]);
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (T& v : data) v = static_cast<T>(dist(rng));
  }
}

template <typename T>
SubNetOutput<T> SubNet<T>::forward(Graph<T>& g, const Tensor<T>& images) const {
  if (images.shape().rank() != 4 || images.dim(1) != config_.in_channels) {
    throw ConfigError("forward: images must be N x " +
                      std::to_string(config_.in_channels) + " x H x W, got " +
                      images.shape().to_string());
  }
  const int h = images.dim(2), w = images.dim(3);
  const int stride = config_.output_stride();
  if (h % stride != 0 || w % stride != 0) {
    throw ConfigError("forward: image size " + std::to_string(h) + "x" +
                      std::to_string(w) + " not divisible by backbone stride " +
                      std::to_string(stride));
  }
  Tensor<T> x = images;
  std::size_t idx = 0;
  for (std::size_t i = 0; i < config_.backbone_channels.size(); ++i) {
    const Conv2dParams cp{config_.backbone_strides[i], 1, 1};
    x = relu(g, conv2d(g, x, param(idx), param(idx + 1), cp));
    idx += 2;
  }
  SubNetOutput<T> out;
  out.features = x;
  out.class_logits = linear(g, global_avg_pool(g, x), param(classifier_index_),
                            param(classifier_index_ + 1));
  const int dil = config_.head_dilation;
  const Conv2dParams dilated{1, dil, dil};
  Tensor<T> s = relu(g, conv2d(g, x, param(classifier_index_ + 2),
                               param(classifier_index_ + 3), dilated));
  s = relu(g, conv2d(g, s, param(classifier_index_ + 4),
                     param(classifier_index_ + 5), dilated));
  s = conv2d(g, s, param(head_index_), param(head_index_ + 1), Conv2dParams{});
  out.seg_logits = bilinear_resize(g, s, h, w);
  return out;
}

template <typename T>
std::vector<Tensor<T>> SubNet<T>::param_tensors() const {
  std::vector<Tensor<T>> out;
  for (const auto& p : params_) out.push_back(p.tensor);
  return out;
}

template <typename T>
std::size_t SubNet<T>::param_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

template <typename T>
const Tensor<T>& SubNet<T>::classifier_weight() const {
  return param(classifier_index_);
}

template <typename T>
Tensor<T>& SubNet<T>::seg_prediction_weight() {
  return param(head_index_);
}

template <typename T>
Tensor<T>& SubNet<T>::seg_prediction_bias() {
  return param(head_index_ + 1);
}

template <typename T>
DualStudent<T>::DualStudent(const SubNetConfig& config, bool dual,
                            std::uint64_t seed)
    : net1(config) {
  net1.init_params(subnet_seed(seed, 0));
  if (dual) {
    net2.emplace(config);
    net2->init_params(subnet_seed(seed, 1));
  }
}

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v & 0xFF),
                              static_cast<unsigned char>((v >> 8) & 0xFF),
                              static_cast<unsigned char>((v >> 16) & 0xFF),
                              static_cast<unsigned char>((v >> 24) & 0xFF)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) {
    throw DataError("checkpoint: truncated file");
  }
  return static_cast<std::uint32_t>(b[0]) |
         (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path,
                      const std::vector<CheckpointRecord>& records) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path.string());
  os.write("DUPL", 4);
  put_u32(os, kCheckpointVersion);
  put_u32(os, static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    put_u32(os, static_cast<std::uint32_t>(r.name.size()));
    os.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
    put_u32(os, static_cast<std::uint32_t>(r.extents.size()));
    for (int e : r.extents) put_u32(os, static_cast<std::uint32_t>(e));
    for (float v : r.values) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      put_u32(os, bits);
    }
  }
  if (!os) throw IoError("failed writing checkpoint: " + path.string());
}

std::vector<CheckpointRecord> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "DUPL", 4) != 0) {
    throw DataError("checkpoint: bad magic in " + path.string());
  }
  const std::uint32_t version = get_u32(is);
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint: unsupported version " + std::to_string(version));
  }
  const std::uint32_t count = get_u32(is);
  std::vector<CheckpointRecord> records;
  records.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointRecord r;
    const std::uint32_t len = get_u32(is);
    if (len > 4096) throw DataError("checkpoint: implausible name length");
    r.name.resize(len);
    if (!is.read(r.name.data(), len)) throw DataError("checkpoint: truncated name");
    const std::uint32_t rank = get_u32(is);
    if (rank > 8) throw DataError("checkpoint: implausible rank");
    std::size_t numel = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      r.extents.push_back(static_cast<int>(get_u32(is)));
      numel *= static_cast<std::size_t>(r.extents.back());
    }
    if (numel > (std::size_t{1} << 28)) throw DataError("checkpoint: implausible size");
    r.values.resize(numel);
    for (float& v : r.values) {
      const std::uint32_t bits = get_u32(is);
      std::memcpy(&v, &bits, 4);
    }
    records.push_back(std::move(r));
  }
  return records;
}

void save_model(const std::filesystem::path& path, const DualStudent<float>& model) {
  std::vector<CheckpointRecord> records;
  for (int i = 0; i < model.size(); ++i) {
    const std::string prefix = i == 0 ? "net1." : "net2.";
    for (const auto& p : model.net(i).params()) {
      CheckpointRecord r;
      r.name = prefix + p.name;
      r.extents = p.tensor.shape().dims();
      r.values.assign(p.tensor.data().begin(), p.tensor.data().end());
      records.push_back(std::move(r));
    }
  }
  write_checkpoint(path, records);
}

DualStudent<float> load_model(const std::filesystem::path& path,
                              const SubNetConfig& config) {
  const auto records = read_checkpoint(path);
  std::map<std::string, const CheckpointRecord*> by_name;
  bool has_net2 = false;
  for (const auto& r : records) {
    by_name[r.name] = &r;
    if (r.name.rfind("net2.", 0) == 0) has_net2 = true;
  }
  if (auto it = by_name.find("net1.classifier.weight"); it != by_name.end()) {
    const int stored_classes = it->second->extents.at(0);
    if (stored_classes != config.num_classes) {
      throw ConfigError("checkpoint has " + std::to_string(stored_classes) +
                        " classes, config expects " +
                        std::to_string(config.num_classes));
    }
  }
  DualStudent<float> model(config, has_net2, 0);
  for (int i = 0; i < model.size(); ++i) {
    const std::string prefix = i == 0 ? "net1." : "net2.";
    for (auto& p : model.net(i).params()) {
      auto it = by_name.find(prefix + p.name);
      if (it == by_name.end()) {
        throw ConfigError("checkpoint missing parameter " + prefix + p.name);
      }
      if (Shape(it->second->extents) != p.tensor.shape()) {
        throw ConfigError("checkpoint shape mismatch for " + prefix + p.name);
      }
      std::copy(it->second->values.begin(), it->second->values.end(),
                p.tensor.data().begin());
    }
  }
  return model;
}

template class SubNet<float>;
template class SubNet<double>;
template struct DualStudent<float>;
template struct DualStudent<double>;

}  // namespace dupl
