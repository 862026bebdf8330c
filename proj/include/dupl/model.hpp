#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dupl/ops.hpp"
#include "dupl/tensor.hpp"

namespace dupl {

struct SubNetConfig {
  int num_classes = 4;
  int in_channels = 3;
  // Backbone: one 3x3 conv + ReLU per entry. The last width is the feature
  // dimension D; the product of strides is the output stride.
  std::vector<int> backbone_channels{32, 64, 96, 128};
  std::vector<int> backbone_strides{2, 2, 1, 1};
  // Width of the two dilated 3x3 head convs; 0 means "same as D".
  int head_channels = 0;
  int head_dilation = 5;

  int feature_dim() const { return backbone_channels.back(); }
  int output_stride() const;
  void validate() const;
};

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
struct SubNetOutput {
  Tensor<T> features;      // N x D x h x w (post-ReLU)
  Tensor<T> class_logits;  // N x C
  Tensor<T> seg_logits;    // N x (C+1) x H x W, channel 0 = background
};

// One student: conv backbone, GAP + linear classifier, dilated seg head.
template <typename T>
class SubNet {
 public:
  explicit SubNet(const SubNetConfig& config);
  // Copies would alias parameter storage.
  SubNet(const SubNet&) = delete;
  SubNet& operator=(const SubNet&) = delete;
  SubNet(SubNet&&) noexcept = default;
  SubNet& operator=(SubNet&&) noexcept = default;

  // Kaiming-uniform (fan-in) weights, zero biases. Deterministic in seed.
  void init_params(std::uint64_t seed);

  SubNetOutput<T> forward(Graph<T>& g, const Tensor<T>& images) const;

  const SubNetConfig& config() const { return config_; }
  std::vector<NamedParam<T>>& params() { return params_; }
  const std::vector<NamedParam<T>>& params() const { return params_; }
  std::vector<Tensor<T>> param_tensors() const;
  std::size_t param_count() const;

  // C x D; the same tensor the classifier multiplies, so CAMs always use
  // the live classifier weights.
  const Tensor<T>& classifier_weight() const;
  Tensor<T>& seg_prediction_weight();
  Tensor<T>& seg_prediction_bias();

 private:
  Tensor<T>& param(std::size_t index) { return params_[index].tensor; }
  const Tensor<T>& param(std::size_t index) const {
    return params_[index].tensor;
  }

  SubNetConfig config_;
  std::vector<NamedParam<T>> params_;
  std::size_t classifier_index_ = 0;
  std::size_t head_index_ = 0;
};

// Two sub-nets with identical architecture and independent parameters.
// net2 is absent when the dual-student ablation is off.
template <typename T>
struct DualStudent {
  SubNet<T> net1;
  std::optional<SubNet<T>> net2;

  DualStudent(const SubNetConfig& config, bool dual, std::uint64_t seed);
  int size() const { return net2 ? 2 : 1; }
  SubNet<T>& net(int index) { return index == 0 ? net1 : *net2; }
  const SubNet<T>& net(int index) const { return index == 0 ? net1 : *net2; }
};

// Sub-net seeds derived from one experiment seed; never equal.
std::uint64_t subnet_seed(std::uint64_t seed, int index);

struct CheckpointRecord {
  std::string name;
  std::vector<int> extents;
  std::vector<float> values;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Flat little-endian file: "DUPL", u32 version, u32 count, then per record
// u32 name length, name bytes, u32 rank, u32 extents..., f32 values.
void write_checkpoint(const std::filesystem::path& path,
                      const std::vector<CheckpointRecord>& records);
std::vector<CheckpointRecord> read_checkpoint(const std::filesystem::path& path);

// Parameters are stored as "net1.<name>" / "net2.<name>".
void save_model(const std::filesystem::path& path, const DualStudent<float>& model);
// Loads into a model built from `config`; throws ConfigError on a class
// count or shape mismatch. The number of sub-nets follows the file.
DualStudent<float> load_model(const std::filesystem::path& path,
                              const SubNetConfig& config);

extern template class SubNet<float>;
extern template class SubNet<double>;
extern template struct DualStudent<float>;
extern template struct DualStudent<double>;

}  // namespace dupl
