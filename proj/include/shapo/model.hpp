#pragma once

// Small causal decoder-only transformer: learned absolute positions,
// pre-norm blocks (RMS norm with learned gain), multi-head attention and a
// GELU MLP, untied unembedding.
//
// Matrices follow the x * W convention, so mlp.down has shape
// [mlp_hidden x d_model] and its row j is the value vector written by
// hidden neuron j.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "shapo/autodiff.hpp"
#include "shapo/error.hpp"
#include "shapo/parameter_store.hpp"
#include "shapo/random.hpp"
#include "shapo/tensor.hpp"

namespace shapo {

struct ModelConfig {
  int vocab_size = 64;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int mlp_hidden = 256;
  int max_seq_len = 64;
  std::uint64_t seed = 0;

  void validate() const {
    detail::require<ConfigError>(vocab_size >= 8, "vocab_size must be >= 8, got ", vocab_size);
    detail::require<ConfigError>(d_model > 0 && n_heads > 0 && d_model % n_heads == 0, "d_model (", d_model,
                                 ") must be divisible by n_heads (", n_heads, ")");
    detail::require<ConfigError>(n_layers >= 1, "n_layers must be >= 1");
    detail::require<ConfigError>(mlp_hidden >= d_model, "mlp_hidden (", mlp_hidden, ") must be >= d_model (", d_model,
                                 ")");
    detail::require<ConfigError>(max_seq_len >= 2, "max_seq_len must be >= 2");
  }

  /// Closed-form parameter count for this architecture.
  std::size_t parameter_count() const {
    const std::size_t V = vocab_size, d = d_model, L = max_seq_len, H = mlp_hidden;
    const std::size_t per_block = 2 * d + 4 * d * d + 2 * d * H;
    return V * d + L * d + static_cast<std::size_t>(n_layers) * per_block + d + V * d;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Prompt tokens followed by response tokens; response_start is the first
/// response position.
struct TokenSequence {
  std::vector<int> tokens;
  std::size_t response_start = 0;

  std::size_t size() const noexcept { return tokens.size(); }
  std::size_t response_length() const noexcept { return tokens.size() - response_start; }
  std::span<const int> prompt() const { return {tokens.data(), response_start}; }
  std::span<const int> response() const { return {tokens.data() + response_start, response_length()}; }

  static TokenSequence join(std::span<const int> prompt, std::span<const int> response) {
    TokenSequence s;
    s.tokens.assign(prompt.begin(), prompt.end());
    s.tokens.insert(s.tokens.end(), response.begin(), response.end());
    s.response_start = prompt.size();
    return s;
  }

  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

enum class ValueSource { mlp_down, attn_value };

inline const char* to_string(ValueSource s) { return s == ValueSource::mlp_down ? "mlp_down" : "attn_value"; }

/// Maps neuron id j to the d_model-length parameter slice v_j.
struct ValueVectorIndex {
  struct Entry {
    std::size_t neuron;
    std::size_t layer;
    std::size_t param_entry;
    std::size_t row;
    std::size_t first_coord;
  };

  ValueSource source = ValueSource::mlp_down;
  std::size_t length = 0;
  std::size_t store_coordinates = 0;
  std::vector<Entry> entries;

  std::size_t size() const noexcept { return entries.size(); }

  /// Global coordinate ids covered by neuron j (contiguous).
  std::vector<std::size_t> coordinates(std::size_t j) const {
    std::vector<std::size_t> out(length);
    for (std::size_t i = 0; i < length; ++i) out[i] = entries.at(j).first_coord + i;
    return out;
  }
};

struct BlockLayout {
  std::size_t ln1, q, k, v, o, ln2, up, down;
};

struct ModelLayout {
  std::size_t tok, pos, lnf, unembed;
  std::vector<BlockLayout> blocks;

  static ModelLayout of(const ParameterStore& p, const ModelConfig& cfg) {
    ModelLayout l;
    l.tok = p.index_of("tok_emb");
    l.pos = p.index_of("pos_emb");
    for (int b = 0; b < cfg.n_layers; ++b) {
      const std::string pre = "block." + std::to_string(b) + ".";
      l.blocks.push_back(BlockLayout{p.index_of(pre + "ln1.gain"), p.index_of(pre + "attn.q"),
                                     p.index_of(pre + "attn.k"), p.index_of(pre + "attn.v"),
                                     p.index_of(pre + "attn.o"), p.index_of(pre + "ln2.gain"),
                                     p.index_of(pre + "mlp.up"), p.index_of(pre + "mlp.down")});
    }
    l.lnf = p.index_of("ln_f.gain");
    l.unembed = p.index_of("unembed");
    return l;
  }
};

inline ValueVectorIndex build_value_index(const ModelConfig& cfg, const ParameterStore& p,
                                          ValueSource source = ValueSource::mlp_down) {
  const ModelLayout layout = ModelLayout::of(p, cfg);
  ValueVectorIndex idx;
  idx.source = source;
  idx.length = static_cast<std::size_t>(cfg.d_model);
  idx.store_coordinates = p.num_coordinates();
  std::size_t j = 0;
  for (std::size_t b = 0; b < layout.blocks.size(); ++b) {
    const std::size_t e = source == ValueSource::mlp_down ? layout.blocks[b].down : layout.blocks[b].v;
    const std::size_t rows = p.value(e).rows();
    for (std::size_t r = 0; r < rows; ++r) {
      idx.entries.push_back({j++, b, e, r, p.offset(e) + r * idx.length});
    }
  }
  return idx;
}

struct InitializedModel {
  ParameterStore params;
  ValueVectorIndex values;
};

inline InitializedModel init_params(const ModelConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const std::size_t V = cfg.vocab_size, d = cfg.d_model, L = cfg.max_seq_len, H = cfg.mlp_hidden;
  const double base_std = 0.02;
  const double resid_std = 0.02 / std::sqrt(static_cast<double>(cfg.n_layers));
  auto gaussian = [&](std::vector<std::size_t> shape, double std) {
    Tensor t(std::move(shape));
    for (double& v : t.storage()) v = std * rng.normal();
    return t;
  };
  ParameterStore p;
  p.add("tok_emb", gaussian({V, d}, base_std));
  p.add("pos_emb", gaussian({L, d}, base_std));
  for (int b = 0; b < cfg.n_layers; ++b) {
    const std::string pre = "block." + std::to_string(b) + ".";
    p.add(pre + "ln1.gain", Tensor({d}, 1.0));
    p.add(pre + "attn.q", gaussian({d, d}, base_std));
    p.add(pre + "attn.k", gaussian({d, d}, base_std));
    p.add(pre + "attn.v", gaussian({d, d}, base_std));
    p.add(pre + "attn.o", gaussian({d, d}, resid_std));
    p.add(pre + "ln2.gain", Tensor({d}, 1.0));
    p.add(pre + "mlp.up", gaussian({d, H}, base_std));
    p.add(pre + "mlp.down", gaussian({H, d}, resid_std));
  }
  p.add("ln_f.gain", Tensor({d}, 1.0));
  p.add("unembed", gaussian({V, d}, base_std));
  ValueVectorIndex idx = build_value_index(cfg, p);
  return {std::move(p), std::move(idx)};
}

/// Binds a parameter store into a graph and builds transformer
/// sub-expressions on top of it.
class ModelGraph {
 public:
  /// Trainable binding: gradients flow back into `params`.
  ModelGraph(ad::Graph& g, const ModelConfig& cfg, ParameterStore& params) : g_(g), cfg_(cfg) {
    bind(params, [&](std::size_t e) { return g.parameter(params, e); });
  }

  struct frozen_t {};
  static constexpr frozen_t frozen{};

  /// Constant binding (reference model, probes, evaluation).
  ModelGraph(ad::Graph& g, const ModelConfig& cfg, const ParameterStore& params, frozen_t) : g_(g), cfg_(cfg) {
    bind(params, [&](std::size_t e) { return g.frozen(params, e); });
  }

  ad::Graph& graph() { return g_; }
  const ModelConfig& config() const { return cfg_; }

  /// Residual stream after the final block, [len x d_model].
  ad::Var residual(std::span<const int> tokens) {
    validate_tokens(tokens);
    const std::size_t len = tokens.size();
    const std::size_t d = cfg_.d_model, heads = cfg_.n_heads, dh = d / heads;
    std::vector<int> positions(len);
    for (std::size_t i = 0; i < len; ++i) positions[i] = static_cast<int>(i);
    ad::Var x = ad::add(ad::embedding(tok_, tokens), ad::embedding(pos_, positions));
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    for (const auto& b : blocks_) {
      ad::Var a = ad::rms_normalize(x, b.ln1);
      ad::Var q = ad::matmul(a, b.q), k = ad::matmul(a, b.k), v = ad::matmul(a, b.v);
      std::vector<ad::Var> outs;
      outs.reserve(heads);
      for (std::size_t h = 0; h < heads; ++h) {
        ad::Var qh = ad::slice_cols(q, h * dh, (h + 1) * dh);
        ad::Var kh = ad::slice_cols(k, h * dh, (h + 1) * dh);
        ad::Var vh = ad::slice_cols(v, h * dh, (h + 1) * dh);
        ad::Var s = ad::causal_mask_add(ad::scale(ad::matmul_bt(qh, kh), inv_sqrt));
        outs.push_back(ad::matmul(ad::row_softmax(s), vh));
      }
      ad::Var attn = heads == 1 ? outs[0] : ad::concat_cols(outs);
      x = ad::add(x, ad::matmul(attn, b.o));
      ad::Var m = ad::rms_normalize(x, b.ln2);
      x = ad::add(x, ad::matmul(ad::gelu(ad::matmul(m, b.up)), b.down));
    }
    return x;
  }

  /// Logits for residual rows, [rows x vocab].
  ad::Var logits(ad::Var residual_rows) { return ad::matmul_bt(ad::rms_normalize(residual_rows, lnf_), unembed_); }

  /// log π(y_t | x, y_<t) for every response token, as a vector.
  ad::Var response_logprobs(const TokenSequence& seq) {
    detail::require<ShapeError>(seq.response_start >= 1, "sequence needs at least one prompt token");
    detail::require<ShapeError>(seq.response_length() >= 1, "empty response");
    const std::size_t first = seq.response_start - 1, last = seq.size() - 1;
    ad::Var rows = ad::slice_rows(residual(seq.tokens), first, last);
    ad::Var logp = ad::row_log_softmax(logits(rows));
    std::vector<std::size_t> r(last - first), c(last - first);
    for (std::size_t i = 0; i < r.size(); ++i) {
      r[i] = i;
      c[i] = static_cast<std::size_t>(seq.tokens[first + i + 1]);
    }
    return ad::gather(logp, r, c);
  }

  /// Σ_t log π(y_t | x, y_<t) over response tokens (optionally divided by
  /// the response length).
  ad::Var sequence_logprob(const TokenSequence& seq, bool length_normalized = false) {
    ad::Var lp = response_logprobs(seq);
    return length_normalized ? ad::mean(lp) : ad::sum(lp);
  }

 private:
  struct BlockVars {
    ad::Var ln1, q, k, v, o, ln2, up, down;
  };

  template <typename Leaf>
  void bind(const ParameterStore& params, Leaf leaf) {
    const ModelLayout l = ModelLayout::of(params, cfg_);
    tok_ = leaf(l.tok);
    pos_ = leaf(l.pos);
    for (const auto& b : l.blocks) {
      blocks_.push_back(BlockVars{leaf(b.ln1), leaf(b.q), leaf(b.k), leaf(b.v), leaf(b.o), leaf(b.ln2), leaf(b.up),
                                  leaf(b.down)});
    }
    lnf_ = leaf(l.lnf);
    unembed_ = leaf(l.unembed);
  }

  void validate_tokens(std::span<const int> tokens) const {
    detail::require<ShapeError>(!tokens.empty(), "empty token sequence");
    detail::require<ShapeError>(tokens.size() <= static_cast<std::size_t>(cfg_.max_seq_len), "sequence length ",
                                tokens.size(), " exceeds max_seq_len ", cfg_.max_seq_len);
    for (int t : tokens) {
      detail::require<ShapeError>(t >= 0 && t < cfg_.vocab_size, "token id ", t, " out of range [0, ",
                                  cfg_.vocab_size, ")");
    }
  }

  ad::Graph& g_;
  ModelConfig cfg_;
  ad::Var tok_, pos_, lnf_, unembed_;
  std::vector<BlockVars> blocks_;
};

/// [len x vocab] logits. If `residual_out` is given it receives the
/// final-block residual computed on the same pass.
inline Tensor forward_logits(const ModelConfig& cfg, const ParameterStore& theta, std::span<const int> tokens,
                             Tensor* residual_out = nullptr) {
  ad::Graph g;
  ModelGraph m(g, cfg, theta, ModelGraph::frozen);
  ad::Var res = m.residual(tokens);
  if (residual_out) *residual_out = res.value();
  return m.logits(res).value();
}

inline double sequence_logprob(const ModelConfig& cfg, const ParameterStore& theta, const TokenSequence& seq,
                               bool length_normalized = false) {
  ad::Graph g;
  ModelGraph m(g, cfg, theta, ModelGraph::frozen);
  return m.sequence_logprob(seq, length_normalized).item();
}

enum class Pooling { last_token, mean_response };

inline const char* to_string(Pooling p) { return p == Pooling::last_token ? "last_token" : "mean_response"; }

/// Final-block residual vector h, pooled at the last token (default) or
/// averaged over response positions.
inline Tensor residual_stream_final(const ModelConfig& cfg, const ParameterStore& theta, const TokenSequence& seq,
                                    Pooling pooling = Pooling::last_token) {
  Tensor res;
  forward_logits(cfg, theta, seq.tokens, &res);
  const std::size_t d = res.cols();
  Tensor h({d});
  if (pooling == Pooling::last_token || seq.response_length() == 0) {
    std::copy_n(res.data() + (res.rows() - 1) * d, d, h.data());
  } else {
    for (std::size_t r = seq.response_start; r < res.rows(); ++r)
      for (std::size_t j = 0; j < d; ++j) h[j] += res(r, j);
    for (double& v : h.storage()) v /= static_cast<double>(seq.response_length());
  }
  return h;
}

/// Live views of every value vector v_j, in neuron order.
inline std::vector<std::pair<std::size_t, std::span<double>>> enumerate_value_vectors(ParameterStore& theta,
                                                                                       const ValueVectorIndex& index) {
  detail::require<ShapeError>(index.store_coordinates == theta.num_coordinates(),
                              "stale value-vector index: built for ", index.store_coordinates,
                              " coordinates, store has ", theta.num_coordinates());
  std::vector<std::pair<std::size_t, std::span<double>>> out;
  out.reserve(index.size());
  for (const auto& e : index.entries) {
    Tensor& t = theta.value(e.param_entry);
    detail::require<ShapeError>(t.cols() == index.length && e.row < t.rows(), "stale value-vector index for entry ",
                                theta.name(e.param_entry));
    out.emplace_back(e.neuron, t.row(e.row));
  }
  return out;
}

/// Read-only copies of the value vectors.
inline std::vector<Tensor> value_vectors(const ParameterStore& theta, const ValueVectorIndex& index) {
  detail::require<ShapeError>(index.store_coordinates == theta.num_coordinates(), "stale value-vector index");
  std::vector<Tensor> out;
  out.reserve(index.size());
  for (const auto& e : index.entries) {
    auto row = theta.value(e.param_entry).row(e.row);
    out.push_back(Tensor::vector({row.begin(), row.end()}));
  }
  return out;
}

struct GenerationMode {
  enum class Kind { greedy, temperature } kind = Kind::greedy;
  double temperature = 1.0;
  std::uint64_t seed = 0;

  static GenerationMode greedy() { return {}; }
  static GenerationMode sampled(double t, std::uint64_t seed) { return {Kind::temperature, t, seed}; }
};

inline std::size_t argmax_row(const Tensor& logits, std::size_t r) {
  auto row = logits.row(r);
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

/// Appends up to max_new tokens (stopping at max_seq_len).
inline TokenSequence generate(const ModelConfig& cfg, const ParameterStore& theta, std::span<const int> prompt,
                              int max_new, GenerationMode mode = GenerationMode::greedy()) {
  TokenSequence seq;
  seq.tokens.assign(prompt.begin(), prompt.end());
  seq.response_start = seq.tokens.size();
  Rng rng(mode.seed);
  for (int step = 0; step < max_new && seq.tokens.size() < static_cast<std::size_t>(cfg.max_seq_len); ++step) {
    const Tensor logits = forward_logits(cfg, theta, seq.tokens);
    const std::size_t last = logits.rows() - 1;
    int next;
    if (mode.kind == GenerationMode::Kind::greedy) {
      next = static_cast<int>(argmax_row(logits, last));
    } else {
      detail::require<ConfigError>(mode.temperature > 0.0, "temperature must be positive");
      auto row = logits.row(last);
      const double mx = *std::max_element(row.begin(), row.end());
      std::vector<double> w(row.size());
      double s = 0.0;
      for (std::size_t j = 0; j < row.size(); ++j) s += (w[j] = std::exp((row[j] - mx) / mode.temperature));
      double u = rng.uniform() * s;
      next = static_cast<int>(row.size() - 1);
      for (std::size_t j = 0; j < w.size(); ++j) {
        if (u < w[j]) {
          next = static_cast<int>(j);
          break;
        }
        u -= w[j];
      }
    }
    seq.tokens.push_back(next);
  }
  return seq;
}

}  // namespace shapo
