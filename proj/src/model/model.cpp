#include "tabscope/model/model.hpp"

#include <cmath>

#include "tabscope/core/random.hpp"
#include "tabscope/nd/ops.hpp"

namespace tabscope::model {
namespace {

template <typename T>
Tensor<T> uniform_tensor(nd::Shape shape, double bound, RandomStream& rng) {
  std::vector<T> values(nd::numel(shape));
  for (auto& v : values) v = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>::from(std::move(shape), std::move(values), true);
}

template <typename T>
LinearParams<T> init_linear(int in, int out, RandomStream& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  return {uniform_tensor<T>({static_cast<std::size_t>(in), static_cast<std::size_t>(out)}, bound, rng),
          Tensor<T>::zeros({static_cast<std::size_t>(out)}, true)};
}

template <typename T>
NormParams<T> init_norm(int d) {
  const auto n = static_cast<std::size_t>(d);
  return {Tensor<T>::filled({n}, T(1), true), Tensor<T>::zeros({n}, true)};
}

template <typename T>
void push(std::vector<Tensor<T>>& out, const LinearParams<T>& p) {
  out.push_back(p.weight);
  out.push_back(p.bias);
}

template <typename T>
void push(std::vector<Tensor<T>>& out, const NormParams<T>& p) {
  out.push_back(p.gamma);
  out.push_back(p.beta);
}

template <typename T>
void push(std::vector<Tensor<T>>& out, const BlockParams<T>& b) {
  push(out, b.features.qkv);
  push(out, b.features.out);
  push(out, b.norm_features);
  push(out, b.items.qkv);
  push(out, b.items.out);
  push(out, b.norm_items);
  push(out, b.mlp_in);
  push(out, b.mlp_out);
  push(out, b.norm_mlp);
}

template <typename U, typename T>
Tensor<U> convert(const Tensor<T>& t) {
  std::vector<U> values(t.data().begin(), t.data().end());
  return Tensor<U>::from(t.shape(), std::move(values), t.requires_grad());
}

template <typename U, typename T>
LinearParams<U> convert(const LinearParams<T>& p) {
  return {convert<U>(p.weight), convert<U>(p.bias)};
}

template <typename U, typename T>
NormParams<U> convert(const NormParams<T>& p) {
  return {convert<U>(p.gamma), convert<U>(p.beta)};
}

template <typename U, typename T>
BlockParams<U> convert(const BlockParams<T>& b) {
  return {{convert<U>(b.features.qkv), convert<U>(b.features.out)},
          convert<U>(b.norm_features),
          {convert<U>(b.items.qkv), convert<U>(b.items.out)},
          convert<U>(b.norm_items),
          convert<U>(b.mlp_in),
          convert<U>(b.mlp_out),
          convert<U>(b.norm_mlp)};
}

template <typename T>
Tensor<T> attention_sublayer(const Tensor<T>& cells, const AttentionParams<T>& attn,
                             const NormParams<T>& norm, int rows, int channels, int heads,
                             nd::AttendAxis axis, int key_limit, T eps) {
  const auto qkv = nd::linear(cells, attn.qkv.weight, attn.qkv.bias);
  const auto mixed = nd::grouped_attention(qkv, static_cast<std::size_t>(rows),
                                           static_cast<std::size_t>(channels),
                                           static_cast<std::size_t>(heads), axis,
                                           static_cast<std::size_t>(key_limit));
  const auto update = nd::linear(mixed, attn.out.weight, attn.out.bias);
  return nd::layer_norm(nd::add(cells, update), norm.gamma, norm.beta, eps);
}

// Copies the query rows of the label channel out of the cell states without
// touching the tape.
Eigen::MatrixXf query_label_states(std::span<const float> cells, int channels, int support,
                                   int rows, int d) {
  Eigen::MatrixXf out(rows - support, d);
  for (int r = support; r < rows; ++r) {
    const float* src = cells.data() + (static_cast<std::size_t>(r) * channels + channels - 1) * d;
    for (int j = 0; j < d; ++j) out(r - support, j) = src[j];
  }
  return out;
}

Eigen::MatrixXf query_label_states(std::span<const double> cells, int channels, int support,
                                   int rows, int d) {
  Eigen::MatrixXf out(rows - support, d);
  for (int r = support; r < rows; ++r) {
    const double* src = cells.data() + (static_cast<std::size_t>(r) * channels + channels - 1) * d;
    for (int j = 0; j < d; ++j) out(r - support, j) = static_cast<float>(src[j]);
  }
  return out;
}

}  // namespace

template <typename T>
std::vector<Tensor<T>> DecoderParams<T>::parameters() const {
  std::vector<Tensor<T>> out;
  push(out, hidden);
  push(out, output);
  return out;
}

template <typename T>
DecoderParams<T> DecoderParams<T>::clone() const {
  return {{hidden.weight.clone(), hidden.bias.clone()}, {output.weight.clone(), output.bias.clone()}};
}

template <typename T>
TfmModel<T> TfmModel<T>::initialize(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  TfmModel<T> m;
  m.config_ = cfg;
  RandomStream rng = RandomStream(seed).derive("model-init");
  const int d = cfg.embed_dim;
  m.encoder.feature = init_linear<T>(1, d, rng);
  m.encoder.label = init_linear<T>(1, d, rng);
  std::vector<T> unknown(d);
  for (auto& v : unknown) v = static_cast<T>(rng.normal(0.0, 0.5));
  m.encoder.unknown_label = Tensor<T>::from({static_cast<std::size_t>(d)}, std::move(unknown), true);
  for (int b = 0; b < cfg.stored_blocks(); ++b) {
    BlockParams<T> block;
    block.features = {init_linear<T>(d, 3 * d, rng), init_linear<T>(d, d, rng)};
    block.norm_features = init_norm<T>(d);
    block.items = {init_linear<T>(d, 3 * d, rng), init_linear<T>(d, d, rng)};
    block.norm_items = init_norm<T>(d);
    block.mlp_in = init_linear<T>(d, cfg.ff_dim, rng);
    block.mlp_out = init_linear<T>(cfg.ff_dim, d, rng);
    block.norm_mlp = init_norm<T>(d);
    m.blocks.push_back(std::move(block));
  }
  m.decoder.hidden = init_linear<T>(d, cfg.ff_dim, rng);
  m.decoder.output = init_linear<T>(cfg.ff_dim, cfg.max_classes, rng);
  return m;
}

template <typename T>
std::vector<Tensor<T>> TfmModel<T>::backbone_parameters() const {
  std::vector<Tensor<T>> out;
  push(out, encoder.feature);
  push(out, encoder.label);
  out.push_back(encoder.unknown_label);
  for (const auto& b : blocks) push(out, b);
  return out;
}

template <typename T>
std::vector<Tensor<T>> TfmModel<T>::parameters() const {
  auto out = backbone_parameters();
  for (auto& p : decoder.parameters()) out.push_back(std::move(p));
  return out;
}

template <typename T>
Tensor<T> TfmModel<T>::encode(const prior::Episode& episode) const {
  const int f = episode.n_features();
  if (f > config_.max_features) {
    throw CapacityError("encode: " + std::to_string(f) + " features exceed the cap of " +
                        std::to_string(config_.max_features));
  }
  if (f < 1) throw CapacityError("encode: episode has no features");
  const int ns = episode.n_support(), nq = episode.n_query();
  const int rows = ns + nq;
  std::vector<T> cells;
  cells.reserve(static_cast<std::size_t>(rows) * f);
  for (int r = 0; r < ns; ++r) {
    for (int j = 0; j < f; ++j) cells.push_back(static_cast<T>(episode.x_support(r, j)));
  }
  for (int r = 0; r < nq; ++r) {
    for (int j = 0; j < f; ++j) cells.push_back(static_cast<T>(episode.x_query(r, j)));
  }
  const std::size_t n_cells = cells.size();
  const auto x = Tensor<T>::from({n_cells, 1}, std::move(cells));
  std::vector<T> ys(episode.y_support.begin(), episode.y_support.end());
  const auto y = Tensor<T>::from({static_cast<std::size_t>(ns), 1}, std::move(ys));

  const auto d = static_cast<std::size_t>(config_.embed_dim);
  const auto features = nd::reshape(nd::linear(x, encoder.feature.weight, encoder.feature.bias),
                                    {static_cast<std::size_t>(rows), static_cast<std::size_t>(f), d});
  const auto labels =
      nd::concat_rows(nd::linear(y, encoder.label.weight, encoder.label.bias),
                      nd::broadcast_rows(encoder.unknown_label, static_cast<std::size_t>(nq)));
  return nd::append_channel(features, labels);
}

template <typename T>
Tensor<T> TfmModel<T>::block_forward(const Tensor<T>& cells, const BlockParams<T>& block, int rows,
                                     int channels, int support_count) const {
  const T eps = static_cast<T>(config_.ln_eps);
  auto h = attention_sublayer(cells, block.features, block.norm_features, rows, channels,
                              config_.n_heads, nd::AttendAxis::kInner, channels, eps);
  h = attention_sublayer(h, block.items, block.norm_items, rows, channels, config_.n_heads,
                         nd::AttendAxis::kOuter, support_count, eps);
  const auto hidden = nd::gelu(nd::linear(h, block.mlp_in.weight, block.mlp_in.bias));
  const auto update = nd::linear(hidden, block.mlp_out.weight, block.mlp_out.bias);
  return nd::layer_norm(nd::add(h, update), block.norm_mlp.gamma, block.norm_mlp.beta, eps);
}

template <typename T>
ForwardResult<T> TfmModel<T>::forward(const prior::Episode& episode,
                                      const InterventionPlan& plan) const {
  if (episode.n_classes > config_.max_classes) {
    throw CapacityError("forward: episode has " + std::to_string(episode.n_classes) +
                        " classes, decoder supports " + std::to_string(config_.max_classes));
  }
  const auto order = plan.schedule(slot_count());
  const int ns = episode.n_support(), rows = ns + episode.n_query();
  const int channels = episode.n_features() + 1;
  const int d = config_.embed_dim;

  ForwardResult<T> result;
  result.trace.model_id = model_id;
  result.trace.episode_id = episode.id;
  result.trace.plan = plan;
  result.trace.layer_states.reserve(order.size() + 1);

  Tensor<T> h = encode(episode);
  result.trace.layer_states.push_back(query_label_states(h.data(), channels, ns, rows, d));
  for (const int slot : order) {
    const auto& block = blocks[config_.looped ? 0 : static_cast<std::size_t>(slot)];
    h = block_forward(h, block, rows, channels, ns);
    result.trace.layer_states.push_back(query_label_states(h.data(), channels, ns, rows, d));
  }
  const auto states = nd::take_channel(h, static_cast<std::size_t>(channels),
                                       static_cast<std::size_t>(ns), static_cast<std::size_t>(rows),
                                       static_cast<std::size_t>(channels - 1));
  result.logits = decode(decoder, states, episode.n_classes);
  return result;
}

template <typename T>
TfmModel<T> TfmModel<T>::clone() const {
  return cast<T>();
}

template <typename T>
template <typename U>
TfmModel<U> TfmModel<T>::cast() const {
  TfmModel<U> m;
  m.config_ = config_;
  m.model_id = model_id;
  m.encoder.feature = convert<U>(encoder.feature);
  m.encoder.label = convert<U>(encoder.label);
  m.encoder.unknown_label = convert<U>(encoder.unknown_label);
  for (const auto& b : blocks) m.blocks.push_back(convert<U>(b));
  m.decoder.hidden = convert<U>(decoder.hidden);
  m.decoder.output = convert<U>(decoder.output);
  return m;
}

template <typename T>
Tensor<T> decode(const DecoderParams<T>& decoder, const Tensor<T>& states, int n_classes) {
  const auto hidden = nd::gelu(nd::linear(states, decoder.hidden.weight, decoder.hidden.bias));
  const auto logits = nd::linear(hidden, decoder.output.weight, decoder.output.bias);
  if (n_classes < 1 || static_cast<std::size_t>(n_classes) > logits.dim(1)) {
    throw CapacityError("decode: " + std::to_string(n_classes) + " classes requested, decoder has " +
                        std::to_string(logits.dim(1)));
  }
  return nd::slice_cols(logits, static_cast<std::size_t>(n_classes));
}

Eigen::MatrixXf to_matrix(const Tensor<float>& t) {
  const auto rows = static_cast<Eigen::Index>(t.dim(0)), cols = static_cast<Eigen::Index>(t.dim(1));
  Eigen::MatrixXf m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = t.data()[r * cols + c];
  }
  return m;
}

Eigen::MatrixXf to_matrix(const Tensor<double>& t) {
  const auto rows = static_cast<Eigen::Index>(t.dim(0)), cols = static_cast<Eigen::Index>(t.dim(1));
  Eigen::MatrixXf m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = static_cast<float>(t.data()[r * cols + c]);
  }
  return m;
}

Tensor<float> from_matrix(const Eigen::MatrixXf& m) {
  std::vector<float> values(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) values[r * m.cols() + c] = m(r, c);
  }
  return Tensor<float>::from({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())},
                             std::move(values));
}

std::vector<float> decode_probabilities(const DecoderParams<float>& decoder,
                                        const Eigen::MatrixXf& states, int n_classes) {
  const auto logits = decode(decoder, from_matrix(states), n_classes);
  return nd::softmax_rows<float>(logits.data(), static_cast<std::size_t>(n_classes));
}

template struct DecoderParams<float>;
template struct DecoderParams<double>;
template class TfmModel<float>;
template class TfmModel<double>;
template TfmModel<double> TfmModel<float>::cast<double>() const;
template TfmModel<float> TfmModel<double>::cast<float>() const;
template Tensor<float> decode(const DecoderParams<float>&, const Tensor<float>&, int);
template Tensor<double> decode(const DecoderParams<double>&, const Tensor<double>&, int);

}  // namespace tabscope::model
