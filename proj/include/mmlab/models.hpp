#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "mmlab/numkit.hpp"

namespace mmlab {

/// One named tensor, row-major.
struct Tensor {
  std::string name;
  std::vector<std::uint32_t> shape;
  std::vector<double> values;

  [[nodiscard]] std::size_t numel() const;
  friend bool operator==(const Tensor&, const Tensor&) = default;
};

/// Ordered list of named tensors. This is the unit of merging arithmetic.
class ModelParams {
 public:
  ModelParams() = default;

  /// Appends a layer; names must be unique and values must match the shape.
  void add(Tensor t);
  void add(std::string name, const Matrix& m);
  void add(std::string name, const Vector& v);

  [[nodiscard]] std::size_t size() const { return layers_.size(); }
  [[nodiscard]] bool empty() const { return layers_.empty(); }
  [[nodiscard]] std::size_t numel() const;

  [[nodiscard]] const Tensor& operator[](std::size_t i) const { return layers_[i]; }
  [[nodiscard]] Tensor& operator[](std::size_t i) { return layers_[i]; }
  [[nodiscard]] const Tensor* find(std::string_view name) const;
  [[nodiscard]] Tensor* find(std::string_view name);
  [[nodiscard]] const Tensor& at(std::string_view name) const;

  [[nodiscard]] Matrix matrix(std::string_view name) const;
  [[nodiscard]] Vector vector(std::string_view name) const;

  /// Layers whose name starts with `prefix`, in order.
  [[nodiscard]] ModelParams filtered(std::string_view prefix) const;

  [[nodiscard]] auto begin() const { return layers_.begin(); }
  [[nodiscard]] auto end() const { return layers_.end(); }
  [[nodiscard]] auto begin() { return layers_.begin(); }
  [[nodiscard]] auto end() { return layers_.end(); }

  /// Same structure, every value zero.
  [[nodiscard]] ModelParams zeros_like() const;

  friend bool operator==(const ModelParams&, const ModelParams&) = default;

 private:
  std::vector<Tensor> layers_;
};

/// True iff the name/shape lists are identical, in order.
[[nodiscard]] bool homologous(const ModelParams& a, const ModelParams& b);
/// Throws StructureError listing the mismatched layers.
void require_homologous(const ModelParams& a, const ModelParams& b, std::string_view context);

[[nodiscard]] ModelParams operator+(const ModelParams& a, const ModelParams& b);
[[nodiscard]] ModelParams operator-(const ModelParams& a, const ModelParams& b);
[[nodiscard]] ModelParams operator*(double s, const ModelParams& a);

/// Bitwise equality of all values (distinguishes -0.0 and NaN payloads).
[[nodiscard]] bool bit_equal(const ModelParams& a, const ModelParams& b);

// ---------------------------------------------------------------------------

struct Architecture {
  std::size_t input_dim = 16;
  std::vector<std::size_t> hidden_dims{64, 64};
  std::size_t embed_dim = 32;

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

/// tanh MLP. Layer l computes h·W_l + b_l; tanh on every layer but the last.
class MlpEncoder {
 public:
  /// Validates the layer list against the architecture.
  MlpEncoder(Architecture arch, ModelParams params);
  /// Infers the architecture from `encoder.<i>.weight` shapes.
  static MlpEncoder from_params(ModelParams params);
  /// Weights ~ N(0, 1/fan_in), biases zero.
  static MlpEncoder initialize(const Architecture& arch, Rng& rng);

  [[nodiscard]] const Architecture& arch() const { return arch_; }
  [[nodiscard]] const ModelParams& params() const { return params_; }
  [[nodiscard]] std::size_t num_layers() const { return arch_.hidden_dims.size() + 1; }
  [[nodiscard]] std::size_t embed_dim() const { return arch_.embed_dim; }

  static std::string weight_name(std::size_t layer);
  static std::string bias_name(std::size_t layer);

 private:
  Architecture arch_;
  ModelParams params_;
};

/// Intermediate activations of a forward pass; activations[0] is the input,
/// activations.back() the embeddings.
struct EncoderCache {
  std::vector<Matrix> activations;
  [[nodiscard]] const Matrix& embeddings() const { return activations.back(); }
};

[[nodiscard]] Matrix encode(const MlpEncoder& encoder, const Matrix& x);
[[nodiscard]] EncoderCache encode_with_cache(const MlpEncoder& encoder, const Matrix& x);

/// logits = emb·W + b. `use_bias == false` means the bias is pinned at zero.
struct ClassifierHead {
  Matrix weight;  // d × C
  Vector bias;    // C
  bool use_bias = true;

  ClassifierHead() = default;
  ClassifierHead(Matrix w, Vector b, bool with_bias = true);
  static ClassifierHead zeros(std::size_t embed_dim, std::size_t num_classes, bool with_bias = true);
  static ClassifierHead initialize(std::size_t embed_dim, std::size_t num_classes, Rng& rng,
                                   bool with_bias = true);

  [[nodiscard]] std::size_t embed_dim() const { return static_cast<std::size_t>(weight.rows()); }
  [[nodiscard]] std::size_t num_classes() const { return static_cast<std::size_t>(weight.cols()); }

  [[nodiscard]] Matrix apply(const Matrix& embeddings) const;
};

struct TaskModel {
  MlpEncoder encoder;
  ClassifierHead head;
  int task_id = 0;

  TaskModel(MlpEncoder enc, ClassifierHead h, int id);
};

[[nodiscard]] Matrix logits(const TaskModel& model, const Matrix& x);
/// Row-wise argmax, lowest index on ties.
[[nodiscard]] std::vector<int> predict_labels(const Matrix& logits);

inline constexpr std::string_view kHeadWeight = "head.weight";
inline constexpr std::string_view kHeadBias = "head.bias";
inline constexpr std::string_view kEncoderPrefix = "encoder.";

/// Encoder layers followed by head.weight and (if used) head.bias.
[[nodiscard]] ModelParams to_params(const TaskModel& model);
[[nodiscard]] ModelParams to_params(const ClassifierHead& head);
[[nodiscard]] TaskModel task_model_from_params(const ModelParams& params, int task_id);
[[nodiscard]] ClassifierHead head_from_params(const ModelParams& params);

// ---------------------------------------------------------------------------

/// Δ_t = Θ_t − Θ_b over encoder layers.
struct TaskVector {
  ModelParams delta;
};

[[nodiscard]] TaskVector task_vector(const ModelParams& theta_t, const ModelParams& theta_b);
[[nodiscard]] ModelParams apply_task_vector(const ModelParams& theta_b, const TaskVector& tv);

// ---------------------------------------------------------------------------
// Checkpoints. Little-endian: "MMLB", u32 version, u32 layer count, then per
// layer: u32 name length, name bytes, u32 rank, rank × u32 dims, f64 values.

inline constexpr std::uint32_t kCheckpointVersion = 1;

[[nodiscard]] std::vector<std::uint8_t> encode_checkpoint(const ModelParams& params);
[[nodiscard]] ModelParams decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
[[nodiscard]] ModelParams load_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------

/// 64-bit FNV-1a, rendered as 16 hex digits.
[[nodiscard]] std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);
[[nodiscard]] std::uint64_t fnv1a64(std::string_view text);
[[nodiscard]] std::string hex64(std::uint64_t v);
[[nodiscard]] std::string params_digest(const ModelParams& params);
[[nodiscard]] std::string file_digest(const std::filesystem::path& path);

}  // namespace mmlab
