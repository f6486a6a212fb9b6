#include "mmlab/models.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace mmlab {

namespace {

std::string dims_str(const std::vector<std::uint32_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::size_t shape_numel(const std::vector<std::uint32_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

ModelParams zip(const ModelParams& a, const ModelParams& b, std::string_view op,
                const std::function<double(double, double)>& f) {
  require_homologous(a, b, op);
  ModelParams out = a;
  for (std::size_t l = 0; l < out.size(); ++l) {
    auto& dst = out[l].values;
    const auto& rhs = b[l].values;
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = f(dst[i], rhs[i]);
  }
  return out;
}

}  // namespace

std::size_t Tensor::numel() const { return values.size(); }

void ModelParams::add(Tensor t) {
  if (find(t.name) != nullptr) throw StructureError("duplicate layer name '" + t.name + "'");
  if (shape_numel(t.shape) != t.values.size()) {
    throw ShapeError("layer '" + t.name + "': shape " + dims_str(t.shape) + " holds " +
                     std::to_string(shape_numel(t.shape)) + " values, got " +
                     std::to_string(t.values.size()));
  }
  layers_.push_back(std::move(t));
}

void ModelParams::add(std::string name, const Matrix& m) {
  Tensor t{std::move(name),
           {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())},
           std::vector<double>(m.data(), m.data() + m.size())};
  add(std::move(t));
}

void ModelParams::add(std::string name, const Vector& v) {
  Tensor t{std::move(name), {static_cast<std::uint32_t>(v.size())},
           std::vector<double>(v.data(), v.data() + v.size())};
  add(std::move(t));
}

std::size_t ModelParams::numel() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.numel();
  return n;
}

const Tensor* ModelParams::find(std::string_view name) const {
  for (const auto& l : layers_)
    if (l.name == name) return &l;
  return nullptr;
}

Tensor* ModelParams::find(std::string_view name) {
  for (auto& l : layers_)
    if (l.name == name) return &l;
  return nullptr;
}

const Tensor& ModelParams::at(std::string_view name) const {
  const Tensor* t = find(name);
  if (t == nullptr) throw StructureError("missing layer '" + std::string(name) + "'");
  return *t;
}

Matrix ModelParams::matrix(std::string_view name) const {
  const Tensor& t = at(name);
  if (t.shape.size() != 2) throw ShapeError("layer '" + t.name + "' is not rank 2: " + dims_str(t.shape));
  return make_matrix(t.shape[0], t.shape[1], t.values);
}

Vector ModelParams::vector(std::string_view name) const {
  const Tensor& t = at(name);
  if (t.shape.size() != 1) throw ShapeError("layer '" + t.name + "' is not rank 1: " + dims_str(t.shape));
  return Eigen::Map<const Vector>(t.values.data(), static_cast<Eigen::Index>(t.values.size()));
}

ModelParams ModelParams::filtered(std::string_view prefix) const {
  ModelParams out;
  for (const auto& l : layers_)
    if (std::string_view(l.name).starts_with(prefix)) out.add(l);
  return out;
}

ModelParams ModelParams::zeros_like() const {
  ModelParams out = *this;
  for (auto& l : out.layers_) std::fill(l.values.begin(), l.values.end(), 0.0);
  return out;
}

bool homologous(const ModelParams& a, const ModelParams& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].name != b[i].name || a[i].shape != b[i].shape) return false;
  return true;
}

void require_homologous(const ModelParams& a, const ModelParams& b, std::string_view context) {
  if (homologous(a, b)) return;
  std::ostringstream msg;
  msg << context << ": parameter sets are not homologous;";
  const std::size_t n = std::max(a.size(), b.size());
  for (std::size_t i = 0; i < n; ++i) {
    const std::string lhs = i < a.size() ? a[i].name + dims_str(a[i].shape) : "<none>";
    const std::string rhs = i < b.size() ? b[i].name + dims_str(b[i].shape) : "<none>";
    if (lhs != rhs) msg << " layer " << i << ": " << lhs << " vs " << rhs << ";";
  }
  throw StructureError(msg.str());
}

ModelParams operator+(const ModelParams& a, const ModelParams& b) {
  return zip(a, b, "add", [](double x, double y) { return x + y; });
}

ModelParams operator-(const ModelParams& a, const ModelParams& b) {
  return zip(a, b, "subtract", [](double x, double y) { return x - y; });
}

ModelParams operator*(double s, const ModelParams& a) {
  ModelParams out = a;
  for (auto& l : out)
    for (auto& v : l.values) v *= s;
  return out;
}

bool bit_equal(const ModelParams& a, const ModelParams& b) {
  if (!homologous(a, b)) return false;
  for (std::size_t l = 0; l < a.size(); ++l) {
    if (std::memcmp(a[l].values.data(), b[l].values.data(), a[l].values.size() * sizeof(double)) != 0)
      return false;
  }
  return true;
}

// ---------------------------------------------------------------------------

std::string MlpEncoder::weight_name(std::size_t layer) {
  return std::string(kEncoderPrefix) + std::to_string(layer) + ".weight";
}

std::string MlpEncoder::bias_name(std::size_t layer) {
  return std::string(kEncoderPrefix) + std::to_string(layer) + ".bias";
}

MlpEncoder::MlpEncoder(Architecture arch, ModelParams params)
    : arch_(std::move(arch)), params_(std::move(params)) {
  std::vector<std::size_t> dims{arch_.input_dim};
  dims.insert(dims.end(), arch_.hidden_dims.begin(), arch_.hidden_dims.end());
  dims.push_back(arch_.embed_dim);

  ModelParams expected;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    expected.add(Tensor{weight_name(l),
                        {static_cast<std::uint32_t>(dims[l]), static_cast<std::uint32_t>(dims[l + 1])},
                        std::vector<double>(dims[l] * dims[l + 1])});
    expected.add(Tensor{bias_name(l), {static_cast<std::uint32_t>(dims[l + 1])},
                        std::vector<double>(dims[l + 1])});
  }
  require_homologous(expected, params_, "encoder architecture");
}

MlpEncoder MlpEncoder::from_params(ModelParams params) {
  Architecture arch;
  arch.hidden_dims.clear();
  std::size_t layers = 0;
  while (params.find(weight_name(layers)) != nullptr) ++layers;
  if (layers == 0) throw StructureError("encoder: no '" + weight_name(0) + "' layer");
  for (std::size_t l = 0; l < layers; ++l) {
    const Tensor& w = params.at(weight_name(l));
    if (w.shape.size() != 2) throw ShapeError("encoder: '" + w.name + "' is not rank 2");
    if (l == 0) arch.input_dim = w.shape[0];
    if (l + 1 < layers) {
      arch.hidden_dims.push_back(w.shape[1]);
    } else {
      arch.embed_dim = w.shape[1];
    }
  }
  return MlpEncoder(std::move(arch), params.filtered(kEncoderPrefix));
}

MlpEncoder MlpEncoder::initialize(const Architecture& arch, Rng& rng) {
  std::vector<std::size_t> dims{arch.input_dim};
  dims.insert(dims.end(), arch.hidden_dims.begin(), arch.hidden_dims.end());
  dims.push_back(arch.embed_dim);
  ModelParams params;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(dims[l]));
    Matrix w(dims[l], dims[l + 1]);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = scale * rng.normal();
    params.add(weight_name(l), w);
    params.add(bias_name(l), Vector(Vector::Zero(static_cast<Eigen::Index>(dims[l + 1]))));
  }
  return MlpEncoder(arch, std::move(params));
}

EncoderCache encode_with_cache(const MlpEncoder& encoder, const Matrix& x) {
  if (static_cast<std::size_t>(x.cols()) != encoder.arch().input_dim) {
    throw ShapeError("encode: input is " + shape_str(x.rows(), x.cols()) + ", encoder expects " +
                     std::to_string(encoder.arch().input_dim) + " columns");
  }
  EncoderCache cache;
  cache.activations.reserve(encoder.num_layers() + 1);
  cache.activations.push_back(x);
  for (std::size_t l = 0; l < encoder.num_layers(); ++l) {
    const Matrix w = encoder.params().matrix(MlpEncoder::weight_name(l));
    const Vector b = encoder.params().vector(MlpEncoder::bias_name(l));
    Matrix h = matmul(cache.activations.back(), w);
    h.rowwise() += b.transpose();
    if (l + 1 < encoder.num_layers()) h = h.array().tanh().matrix();
    cache.activations.push_back(std::move(h));
  }
  return cache;
}

Matrix encode(const MlpEncoder& encoder, const Matrix& x) {
  return std::move(encode_with_cache(encoder, x).activations.back());
}

ClassifierHead::ClassifierHead(Matrix w, Vector b, bool with_bias)
    : weight(std::move(w)), bias(std::move(b)), use_bias(with_bias) {
  if (bias.size() != weight.cols()) {
    throw ShapeError("classifier head: weight " + shape_str(weight.rows(), weight.cols()) +
                     " with bias of length " + std::to_string(bias.size()));
  }
  if (!use_bias) bias.setZero();
}

ClassifierHead ClassifierHead::zeros(std::size_t embed_dim, std::size_t num_classes, bool with_bias) {
  return {Matrix::Zero(static_cast<Eigen::Index>(embed_dim), static_cast<Eigen::Index>(num_classes)),
          Vector::Zero(static_cast<Eigen::Index>(num_classes)), with_bias};
}

ClassifierHead ClassifierHead::initialize(std::size_t embed_dim, std::size_t num_classes, Rng& rng,
                                          bool with_bias) {
  ClassifierHead h = zeros(embed_dim, num_classes, with_bias);
  const double scale = 1.0 / std::sqrt(static_cast<double>(embed_dim));
  for (Eigen::Index i = 0; i < h.weight.size(); ++i) h.weight.data()[i] = scale * rng.normal();
  return h;
}

Matrix ClassifierHead::apply(const Matrix& embeddings) const {
  if (embeddings.cols() != weight.rows()) {
    throw ShapeError("classifier head: embeddings " + shape_str(embeddings.rows(), embeddings.cols()) +
                     " vs weight " + shape_str(weight.rows(), weight.cols()));
  }
  Matrix out = matmul(embeddings, weight);
  if (use_bias) out.rowwise() += bias.transpose();
  return out;
}

TaskModel::TaskModel(MlpEncoder enc, ClassifierHead h, int id)
    : encoder(std::move(enc)), head(std::move(h)), task_id(id) {
  if (encoder.embed_dim() != head.embed_dim()) {
    throw ShapeError("task model: encoder embed_dim " + std::to_string(encoder.embed_dim()) +
                     " vs head rows " + std::to_string(head.embed_dim()));
  }
}

Matrix logits(const TaskModel& model, const Matrix& x) { return model.head.apply(encode(model.encoder, x)); }

std::vector<int> predict_labels(const Matrix& logits) {
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index r = 0; r < logits.rows(); ++r) out[static_cast<std::size_t>(r)] = static_cast<int>(argmax(logits.row(r)));
  return out;
}

ModelParams to_params(const ClassifierHead& head) {
  ModelParams p;
  p.add(std::string(kHeadWeight), head.weight);
  if (head.use_bias) p.add(std::string(kHeadBias), head.bias);
  return p;
}

ModelParams to_params(const TaskModel& model) {
  ModelParams p = model.encoder.params();
  for (const auto& t : to_params(model.head)) p.add(t);
  return p;
}

ClassifierHead head_from_params(const ModelParams& params) {
  Matrix w = params.matrix(kHeadWeight);
  if (params.find(kHeadBias) == nullptr) {
    const auto classes = static_cast<std::size_t>(w.cols());
    return {std::move(w), Vector::Zero(static_cast<Eigen::Index>(classes)), false};
  }
  return {std::move(w), params.vector(kHeadBias), true};
}

TaskModel task_model_from_params(const ModelParams& params, int task_id) {
  return {MlpEncoder::from_params(params), head_from_params(params), task_id};
}

TaskVector task_vector(const ModelParams& theta_t, const ModelParams& theta_b) {
  require_homologous(theta_t, theta_b, "task_vector");
  return {theta_t - theta_b};
}

ModelParams apply_task_vector(const ModelParams& theta_b, const TaskVector& tv) { return theta_b + tv.delta; }

// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'M', 'M', 'L', 'B'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& out, double d) {
  const auto v = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  void need(std::size_t n, std::string_view what) const {
    if (bytes_.size() - pos_ < n) {
      throw TruncatedError("checkpoint truncated while reading " + std::string(what) + " at byte " +
                           std::to_string(pos_));
    }
  }
  std::uint32_t u32(std::string_view what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  double f64(std::string_view what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(v);
  }
  std::string str(std::size_t n, std::string_view what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  [[nodiscard]] std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ModelParams& params) {
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& t : params) {
    put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) put_u32(out, d);
    for (double v : t.values) put_f64(out, v);
  }
  return out;
}

ModelParams decode_checkpoint(std::span<const std::uint8_t> bytes) {
  const std::size_t probe = std::min<std::size_t>(bytes.size(), 4);
  if (probe > 0 && std::memcmp(bytes.data(), kMagic, probe) != 0) throw BadMagicError("checkpoint: bad magic");
  Reader in(bytes);
  in.str(4, "magic");
  const std::uint32_t version = in.u32("version");
  if (version != kCheckpointVersion) {
    throw VersionMismatchError("checkpoint: version " + std::to_string(version) + ", expected " +
                               std::to_string(kCheckpointVersion));
  }
  const std::uint32_t count = in.u32("layer count");
  ModelParams params;
  for (std::uint32_t l = 0; l < count; ++l) {
    Tensor t;
    const std::uint32_t name_len = in.u32("name length");
    t.name = in.str(name_len, "layer name");
    const std::uint32_t rank = in.u32("rank");
    in.need(std::size_t{4} * rank, "dims");
    t.shape.resize(rank);
    for (auto& d : t.shape) d = in.u32("dims");
    const std::size_t n = shape_numel(t.shape);
    if (n > in.remaining() / 8) in.need(n * 8, "values of '" + t.name + "'");
    t.values.resize(n);
    for (auto& v : t.values) v = in.f64("values");
    params.add(std::move(t));
  }
  if (in.remaining() != 0) {
    throw IoError("checkpoint: " + std::to_string(in.remaining()) + " trailing bytes");
  }
  return params;
}

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(params);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

namespace {
std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}
}  // namespace

ModelParams load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return decode_checkpoint(bytes);
  } catch (const BadMagicError& e) {
    throw BadMagicError(path.string() + ": " + e.what());
  } catch (const VersionMismatchError& e) {
    throw VersionMismatchError(path.string() + ": " + e.what());
  } catch (const TruncatedError& e) {
    throw TruncatedError(path.string() + ": " + e.what());
  }
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a64(std::string_view text) {
  return fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string hex64(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = kDigits[v & 0xf];
  return s;
}

std::string params_digest(const ModelParams& params) { return hex64(fnv1a64(encode_checkpoint(params))); }

std::string file_digest(const std::filesystem::path& path) { return hex64(fnv1a64(read_file(path))); }

}  // namespace mmlab
