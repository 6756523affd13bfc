#include "clsd/model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "clsd/errors.hpp"
#include "clsd/random.hpp"

namespace clsd {

std::string_view to_string(Backbone b) {
  switch (b) {
    case Backbone::lr: return "lr";
    case Backbone::fm: return "fm";
    case Backbone::deepfm: return "deepfm";
  }
  return "?";
}

Backbone parse_backbone(std::string_view text) {
  if (text == "lr") return Backbone::lr;
  if (text == "fm") return Backbone::fm;
  if (text == "deepfm") return Backbone::deepfm;
  throw ConfigError("unknown backbone '" + std::string(text) + "' (expected lr|fm|deepfm)");
}

double sigmoid(double logit) {
  if (logit >= 0.0) return 1.0 / (1.0 + std::exp(-logit));
  const double e = std::exp(logit);
  return e / (1.0 + e);
}

double predict(double logit) { return std::clamp(sigmoid(logit), kProbEpsilon, 1.0 - kProbEpsilon); }

// ---------------------------------------------------------------------------

std::size_t ModelSpec::feature_count() const {
  std::size_t n = 0;
  for (auto c : cardinalities) n += c;
  return n;
}

std::size_t ModelSpec::shared_width() const {
  switch (backbone) {
    case Backbone::lr: return field_count();
    case Backbone::fm: return field_count() * embedding_dim;
    case Backbone::deepfm: return mlp_hidden.empty() ? field_count() * embedding_dim : mlp_hidden.back();
  }
  return 0;
}

void ModelSpec::validate() const {
  if (cardinalities.empty()) throw ConfigError("model needs at least one field");
  for (auto c : cardinalities)
    if (c == 0) throw ConfigError("zero-cardinality field");
  if (has_embeddings() && embedding_dim == 0) throw ConfigError("embedding_dim must be positive");
  for (auto w : mlp_hidden)
    if (w == 0) throw ConfigError("zero-width MLP layer");
  if (adgate) {
    if (groups == 0) throw ConfigError("AdGate needs at least one group");
    for (auto w : adgate_hidden)
      if (w == 0) throw ConfigError("zero-width AdGate layer");
  }
}

ModelSpec make_spec(const FieldSchema& schema, Backbone backbone, bool adgate, bool aux_head) {
  schema.validate();
  ModelSpec spec;
  spec.backbone = backbone;
  spec.cardinalities = schema.cardinalities;
  spec.groups = schema.group_count();
  spec.adgate = adgate;
  spec.aux_head = aux_head;
  return spec;
}

namespace {

Block take(std::size_t& cursor, std::size_t n) {
  Block b{cursor, n};
  cursor += n;
  return b;
}

LayerBlocks take_layer(std::size_t& cursor, std::size_t in, std::size_t out) {
  LayerBlocks l;
  l.in = in;
  l.out = out;
  l.weight = take(cursor, in * out);
  l.bias = take(cursor, out);
  return l;
}

}  // namespace

Layout make_layout(const ModelSpec& spec) {
  spec.validate();
  Layout layout;
  std::size_t cursor = 0;
  std::size_t off = 0;
  for (auto c : spec.cardinalities) {
    layout.field_offsets.push_back(off);
    off += c;
  }
  const std::size_t features = spec.feature_count();
  const std::size_t d = spec.embedding_dim;

  if (spec.has_embeddings()) layout.embeddings = take(cursor, features * d);
  layout.first_order = take(cursor, features);
  if (spec.has_mlp()) {
    std::size_t in = spec.field_count() * d;
    for (auto w : spec.mlp_hidden) {
      layout.mlp.push_back(take_layer(cursor, in, w));
      in = w;
    }
    layout.mlp.push_back(take_layer(cursor, in, 1));
  }
  if (spec.aux_head) layout.aux = take_layer(cursor, spec.shared_width(), 1);
  layout.bias = take(cursor, 1);

  layout.adgate_begin = cursor;
  if (spec.adgate) {
    std::size_t in = spec.groups;
    for (auto w : spec.adgate_hidden) {
      layout.adgate.push_back(take_layer(cursor, in, w));
      in = w;
    }
    layout.adgate.push_back(take_layer(cursor, in, 1));
  }
  layout.adgate_end = cursor;
  layout.total = cursor;
  return layout;
}

std::vector<std::pair<std::string, Block>> Layout::sections() const {
  std::vector<std::pair<std::string, Block>> out;
  if (embeddings.size) out.emplace_back("embeddings", embeddings);
  out.emplace_back("first_order", first_order);
  for (std::size_t l = 0; l < mlp.size(); ++l) {
    out.emplace_back("mlp." + std::to_string(l) + ".w", mlp[l].weight);
    out.emplace_back("mlp." + std::to_string(l) + ".b", mlp[l].bias);
  }
  for (std::size_t l = 0; l < adgate.size(); ++l) {
    out.emplace_back("adgate." + std::to_string(l) + ".w", adgate[l].weight);
    out.emplace_back("adgate." + std::to_string(l) + ".b", adgate[l].bias);
  }
  if (aux.out) {
    out.emplace_back("aux.w", aux.weight);
    out.emplace_back("aux.b", aux.bias);
  }
  out.emplace_back("bias", bias);
  return out;
}

ModelParams::ModelParams(ModelSpec s) : spec(std::move(s)), layout(make_layout(spec)), values(layout.total, 0.0) {}

ModelParams init_params(const ModelSpec& spec, std::uint64_t seed, double scale) {
  ModelParams params(spec);
  Rng backbone_rng(derive_seed(seed, 11));
  Rng gate_rng(derive_seed(seed, 12));
  Rng aux_rng(derive_seed(seed, 13));
  const auto& L = params.layout;
  for (std::size_t i = 0; i < L.total; ++i) {
    Rng* rng = &backbone_rng;
    if (L.is_adgate(i)) rng = &gate_rng;
    else if (L.aux.out && i >= L.aux.weight.offset && i < L.aux.bias.offset + L.aux.bias.size) rng = &aux_rng;
    params.values[i] = rng->uniform(-scale, scale);
  }
  if (spec.adgate) {
    // p_local is added to the backbone probability; start it near zero so
    // switching the gate on does not shift every prediction by 0.5.
    const auto& out = L.adgate.back();
    params.values[out.bias.offset] = std::log(kAdGateInitProb / (1.0 - kAdGateInitProb));
  }
  return params;
}

std::uint64_t params_hash(const ModelParams& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double v : params.values) {
    unsigned char bytes[sizeof(double)];
    std::memcpy(bytes, &v, sizeof v);
    for (unsigned char b : bytes) {
      h ^= b;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

// ---------------------------------------------------------------------------

namespace {

void check_batch(const ModelParams& params, const Batch& batch) {
  const auto& spec = params.spec;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& r = batch[i];
    if (r.feature_ids.size() != spec.field_count())
      throw ContractViolation("sample has " + std::to_string(r.feature_ids.size()) + " fields, model expects " +
                              std::to_string(spec.field_count()));
    for (std::size_t f = 0; f < r.feature_ids.size(); ++f) {
      if (r.feature_ids[f] >= spec.cardinalities[f])
        throw std::out_of_range("feature id " + std::to_string(r.feature_ids[f]) + " out of range for field " +
                                std::to_string(f));
    }
  }
}

/// Runs the AdGate for every sample; fills adgate_hidden_pre / adgate_logit.
void run_adgate(const ModelParams& params, const Batch& batch, ForwardTrace& t) {
  if (!params.spec.adgate) throw ConfigError("model has no AdGate parameters");
  const auto& layers = params.layout.adgate;
  const std::size_t n = batch.size();
  t.adgate_hidden_pre.assign(layers.size() - 1, {});
  for (std::size_t l = 0; l + 1 < layers.size(); ++l) t.adgate_hidden_pre[l].resize(n * layers[l].out);
  t.adgate_logit.resize(n);
  std::vector<double> act;
  std::vector<double> next;
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint32_t g = batch[i].group_id;
    if (g >= params.spec.groups) throw std::out_of_range("group id " + std::to_string(g) + " out of range");
    // Layer 0 on a one-hot input is a column lookup.
    {
      const auto& L0 = layers[0];
      const auto w = params.block(L0.weight);
      const auto b = params.block(L0.bias);
      next.resize(L0.out);
      for (std::size_t o = 0; o < L0.out; ++o) next[o] = w[o * L0.in + g] + b[o];
    }
    for (std::size_t l = 1; l < layers.size(); ++l) {
      auto& pre = t.adgate_hidden_pre[l - 1];
      std::copy(next.begin(), next.end(), pre.begin() + static_cast<std::ptrdiff_t>(i * next.size()));
      act.resize(next.size());
      for (std::size_t o = 0; o < next.size(); ++o) act[o] = std::max(0.0, next[o]);
      const auto& L = layers[l];
      const auto w = params.block(L.weight);
      const auto b = params.block(L.bias);
      next.assign(L.out, 0.0);
      for (std::size_t o = 0; o < L.out; ++o) {
        double s = b[o];
        for (std::size_t j = 0; j < L.in; ++j) s += w[o * L.in + j] * act[j];
        next[o] = s;
      }
    }
    t.adgate_logit[i] = next[0];
  }
}

}  // namespace

ForwardTrace forward(const ModelParams& params, const Batch& batch, ForwardOptions opts) {
  check_batch(params, batch);
  const auto& spec = params.spec;
  const auto& L = params.layout;
  const std::size_t n = batch.size();
  const std::size_t k = spec.field_count();
  const std::size_t d = spec.embedding_dim;
  if (opts.aux && !spec.aux_head) throw ConfigError("model has no auxiliary head");

  ForwardTrace t;
  t.n = n;
  t.feature_index.resize(n * k);
  t.group.resize(n);
  t.backbone_logit.resize(n);
  if (spec.has_embeddings()) t.fm_sum.resize(n * d);
  if (spec.has_mlp()) {
    t.mlp_pre.resize(L.mlp.size() - 1);
    for (std::size_t l = 0; l + 1 < L.mlp.size(); ++l) t.mlp_pre[l].resize(n * L.mlp[l].out);
  }
  if (opts.aux) t.aux_output.resize(n);

  const auto emb = params.block(L.embeddings);
  const auto w1 = params.block(L.first_order);
  const double bias = params.values[L.bias.offset];
  std::vector<double> act;
  std::vector<double> next;

  for (std::size_t i = 0; i < n; ++i) {
    const auto& rec = batch[i];
    std::size_t* idx = &t.feature_index[i * k];
    for (std::size_t f = 0; f < k; ++f) idx[f] = L.field_offsets[f] + rec.feature_ids[f];
    t.group[i] = rec.group_id;

    double z = bias;
    for (std::size_t f = 0; f < k; ++f) z += w1[idx[f]];

    if (spec.has_embeddings()) {
      double* sum = &t.fm_sum[i * d];
      double pairwise = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        double s = 0.0;
        double sq = 0.0;
        for (std::size_t f = 0; f < k; ++f) {
          const double v = emb[idx[f] * d + c];
          s += v;
          sq += v * v;
        }
        sum[c] = s;
        pairwise += s * s - sq;
      }
      z += 0.5 * pairwise;
    }

    if (spec.has_mlp()) {
      act.resize(k * d);
      for (std::size_t f = 0; f < k; ++f)
        for (std::size_t c = 0; c < d; ++c) act[f * d + c] = emb[idx[f] * d + c];
      for (std::size_t l = 0; l < L.mlp.size(); ++l) {
        const auto& layer = L.mlp[l];
        const auto w = params.block(layer.weight);
        const auto b = params.block(layer.bias);
        next.assign(layer.out, 0.0);
        for (std::size_t o = 0; o < layer.out; ++o) {
          double s = b[o];
          const double* row = &w[o * layer.in];
          for (std::size_t j = 0; j < layer.in; ++j) s += row[j] * act[j];
          next[o] = s;
        }
        if (l + 1 < L.mlp.size()) {
          std::copy(next.begin(), next.end(), t.mlp_pre[l].begin() + static_cast<std::ptrdiff_t>(i * layer.out));
          act.resize(layer.out);
          for (std::size_t o = 0; o < layer.out; ++o) act[o] = std::max(0.0, next[o]);
        }
      }
      z += next[0];
      // `act` now holds the last hidden activation (the deepfm shared representation).
    }

    if (opts.aux) {
      const auto aw = params.block(L.aux.weight);
      double r = params.values[L.aux.bias.offset];
      switch (spec.backbone) {
        case Backbone::lr:
          for (std::size_t f = 0; f < k; ++f) r += aw[f] * w1[idx[f]];
          break;
        case Backbone::fm:
          for (std::size_t f = 0; f < k; ++f)
            for (std::size_t c = 0; c < d; ++c) r += aw[f * d + c] * emb[idx[f] * d + c];
          break;
        case Backbone::deepfm:
          for (std::size_t j = 0; j < aw.size(); ++j) r += aw[j] * act[j];
          break;
      }
      t.aux_output[i] = r;
    }
    t.backbone_logit[i] = z;
  }

  if (opts.adgate) run_adgate(params, batch, t);
  return t;
}

ForwardTrace adgate_forward(const ModelParams& params, const Batch& batch) {
  if (!params.spec.adgate) throw ConfigError("model has no AdGate parameters");
  ForwardTrace t;
  t.n = batch.size();
  t.group.resize(t.n);
  for (std::size_t i = 0; i < t.n; ++i) t.group[i] = batch[i].group_id;
  run_adgate(params, batch, t);
  return t;
}

// ---------------------------------------------------------------------------

namespace {

void backbone_backward(const ModelParams& params, const ForwardTrace& t, std::span<const double> up,
                       std::span<const double> up_aux, std::span<double> grad) {
  const auto& spec = params.spec;
  const auto& L = params.layout;
  const std::size_t k = spec.field_count();
  const std::size_t d = spec.embedding_dim;
  const auto emb = params.block(L.embeddings);
  const auto w1 = params.block(L.first_order);
  const bool with_aux = !up_aux.empty();
  if (with_aux && !t.has_aux()) throw ContractViolation("aux upstream given but the trace has no aux output");

  std::vector<std::vector<double>> acts(L.mlp.size());  // input activation of each MLP layer
  std::vector<double> da;
  std::vector<double> dpre;

  for (std::size_t i = 0; i < t.n; ++i) {
    const double g = up.empty() ? 0.0 : up[i];
    const double ga = with_aux ? up_aux[i] : 0.0;
    if (g == 0.0 && ga == 0.0) continue;
    const std::size_t* idx = &t.feature_index[i * k];

    grad[L.bias.offset] += g;
    for (std::size_t f = 0; f < k; ++f) grad[L.first_order.offset + idx[f]] += g;

    if (spec.has_embeddings()) {
      const double* sum = &t.fm_sum[i * d];
      for (std::size_t f = 0; f < k; ++f)
        for (std::size_t c = 0; c < d; ++c) {
          const std::size_t e = idx[f] * d + c;
          grad[L.embeddings.offset + e] += g * (sum[c] - emb[e]);
        }
    }

    if (spec.has_mlp()) {
      const std::size_t H = L.mlp.size() - 1;
      acts[0].resize(k * d);
      for (std::size_t f = 0; f < k; ++f)
        for (std::size_t c = 0; c < d; ++c) acts[0][f * d + c] = emb[idx[f] * d + c];
      for (std::size_t l = 1; l <= H; ++l) {
        const auto& pre = t.mlp_pre[l - 1];
        const std::size_t w = L.mlp[l - 1].out;
        acts[l].resize(w);
        for (std::size_t o = 0; o < w; ++o) acts[l][o] = std::max(0.0, pre[i * w + o]);
      }
      // Output layer.
      const auto& out = L.mlp[H];
      const auto wout = params.block(out.weight);
      da.assign(out.in, 0.0);
      for (std::size_t j = 0; j < out.in; ++j) {
        grad[out.weight.offset + j] += g * acts[H][j];
        da[j] = g * wout[j];
      }
      grad[out.bias.offset] += g;
      if (with_aux && ga != 0.0) {
        const auto aw = params.block(L.aux.weight);
        for (std::size_t j = 0; j < da.size(); ++j) da[j] += ga * aw[j];
      }
      for (std::size_t l = H; l-- > 0;) {
        const auto& layer = L.mlp[l];
        const auto w = params.block(layer.weight);
        const auto& pre = t.mlp_pre[l];
        dpre.resize(layer.out);
        for (std::size_t o = 0; o < layer.out; ++o) dpre[o] = pre[i * layer.out + o] > 0.0 ? da[o] : 0.0;
        da.assign(layer.in, 0.0);
        for (std::size_t o = 0; o < layer.out; ++o) {
          const double dp = dpre[o];
          if (dp == 0.0) continue;
          grad[layer.bias.offset + o] += dp;
          double* gw = &grad[layer.weight.offset + o * layer.in];
          const double* row = &w[o * layer.in];
          const auto& a = acts[l];
          for (std::size_t j = 0; j < layer.in; ++j) {
            gw[j] += dp * a[j];
            da[j] += dp * row[j];
          }
        }
      }
      for (std::size_t f = 0; f < k; ++f)
        for (std::size_t c = 0; c < d; ++c) grad[L.embeddings.offset + idx[f] * d + c] += da[f * d + c];
    }

    if (with_aux && ga != 0.0) {
      const auto aw = params.block(L.aux.weight);
      grad[L.aux.bias.offset] += ga;
      switch (spec.backbone) {
        case Backbone::lr:
          for (std::size_t f = 0; f < k; ++f) {
            grad[L.aux.weight.offset + f] += ga * w1[idx[f]];
            grad[L.first_order.offset + idx[f]] += ga * aw[f];
          }
          break;
        case Backbone::fm:
          for (std::size_t f = 0; f < k; ++f)
            for (std::size_t c = 0; c < d; ++c) {
              const std::size_t e = idx[f] * d + c;
              grad[L.aux.weight.offset + f * d + c] += ga * emb[e];
              grad[L.embeddings.offset + e] += ga * aw[f * d + c];
            }
          break;
        case Backbone::deepfm: {
          const auto& last = acts[L.mlp.size() - 1];
          for (std::size_t j = 0; j < aw.size(); ++j) grad[L.aux.weight.offset + j] += ga * last[j];
          break;  // the representation gradient was folded into the MLP pass
        }
      }
    }
  }
}

void adgate_backward(const ModelParams& params, const ForwardTrace& t, std::span<const double> up,
                     std::span<double> grad) {
  if (!params.spec.adgate) throw ConfigError("model has no AdGate parameters");
  if (!t.has_adgate()) throw ContractViolation("trace has no AdGate pass");
  const auto& layers = params.layout.adgate;
  const std::size_t last = layers.size() - 1;
  std::vector<double> da;
  std::vector<double> dpre;
  std::vector<double> act;
  for (std::size_t i = 0; i < t.n; ++i) {
    const double g = up[i];
    if (g == 0.0) continue;
    const std::uint32_t grp = t.group[i];
    da.assign(1, g);
    for (std::size_t l = last + 1; l-- > 0;) {
      const auto& layer = layers[l];
      const auto w = params.block(layer.weight);
      // dpre for this layer's output: the output layer is linear, hidden layers are ReLU.
      dpre.resize(layer.out);
      if (l == last) {
        dpre[0] = da[0];
      } else {
        const auto& pre = t.adgate_hidden_pre[l];
        for (std::size_t o = 0; o < layer.out; ++o) dpre[o] = pre[i * layer.out + o] > 0.0 ? da[o] : 0.0;
      }
      for (std::size_t o = 0; o < layer.out; ++o) grad[layer.bias.offset + o] += dpre[o];
      if (l == 0) {
        for (std::size_t o = 0; o < layer.out; ++o) grad[layer.weight.offset + o * layer.in + grp] += dpre[o];
        break;
      }
      const auto& prev_pre = t.adgate_hidden_pre[l - 1];
      act.resize(layer.in);
      for (std::size_t j = 0; j < layer.in; ++j) act[j] = std::max(0.0, prev_pre[i * layer.in + j]);
      da.assign(layer.in, 0.0);
      for (std::size_t o = 0; o < layer.out; ++o) {
        for (std::size_t j = 0; j < layer.in; ++j) {
          grad[layer.weight.offset + o * layer.in + j] += dpre[o] * act[j];
          da[j] += dpre[o] * w[o * layer.in + j];
        }
      }
    }
  }
}

}  // namespace

void backward_into(const ModelParams& params, const ForwardTrace& trace, const Upstream& upstream,
                   GradTarget target, std::span<double> grad) {
  if (grad.size() != params.size()) throw ContractViolation("gradient buffer does not match parameter count");
  auto check_len = [&](std::span<const double> s, const char* what) {
    if (!s.empty() && s.size() != trace.n)
      throw ContractViolation(std::string(what) + " upstream has " + std::to_string(s.size()) +
                              " entries, trace has " + std::to_string(trace.n));
  };
  check_len(upstream.backbone, "backbone");
  check_len(upstream.adgate, "adgate");
  check_len(upstream.aux, "aux");
  if (trace.feature_index.size() != trace.n * params.spec.field_count() && target != GradTarget::adgate)
    throw ContractViolation("trace does not match this model");

  if (target != GradTarget::adgate && (!upstream.backbone.empty() || !upstream.aux.empty()))
    backbone_backward(params, trace, upstream.backbone, upstream.aux, grad);
  if (target != GradTarget::backbone && !upstream.adgate.empty()) adgate_backward(params, trace, upstream.adgate, grad);
}

std::vector<double> backward(const ModelParams& params, const ForwardTrace& trace, const Upstream& upstream,
                             GradTarget target) {
  std::vector<double> grad(params.size(), 0.0);
  backward_into(params, trace, upstream, target, grad);
  return grad;
}

std::vector<double> backbone_predictions(const ModelParams& params, const Corpus& corpus) {
  const auto rows = all_rows(corpus);
  const auto trace = forward(params, Batch(corpus, rows));
  std::vector<double> p(trace.n);
  for (std::size_t i = 0; i < trace.n; ++i) p[i] = predict(trace.backbone_logit[i]);
  return p;
}

std::vector<double> local_predictions(const ModelParams& params, const Corpus& corpus) {
  if (!params.spec.adgate) return {};
  const auto rows = all_rows(corpus);
  const auto trace = adgate_forward(params, Batch(corpus, rows));
  std::vector<double> p(trace.n);
  for (std::size_t i = 0; i < trace.n; ++i) p[i] = predict(trace.adgate_logit[i]);
  return p;
}

std::vector<double> served_predictions(const ModelParams& params, const Corpus& corpus) {
  auto p = backbone_predictions(params, corpus);
  const auto local = local_predictions(params, corpus);
  for (std::size_t i = 0; i < local.size(); ++i) p[i] = std::clamp(p[i] + local[i], kProbEpsilon, 1.0 - kProbEpsilon);
  return p;
}

// ---------------------------------------------------------------------------

namespace {

std::string join(const std::vector<std::size_t>& xs) {
  if (xs.empty()) return "-";
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + std::to_string(xs[i]);
  return s;
}

template <typename T>
std::vector<T> parse_list(std::string_view text) {
  std::vector<T> out;
  if (text == "-") return out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto comma = text.find(',', pos);
    if (comma == std::string_view::npos) comma = text.size();
    auto tok = text.substr(pos, comma - pos);
    T v{};
    auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || p != tok.data() + tok.size() || tok.empty())
      throw ParseError(2, "bad list element '" + std::string(tok) + "'");
    out.push_back(v);
    pos = comma + 1;
  }
  return out;
}

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

}  // namespace

std::string spec_line(const ModelSpec& s) {
  std::vector<std::size_t> cards(s.cardinalities.begin(), s.cardinalities.end());
  std::ostringstream os;
  os << to_string(s.backbone) << " dim=" << s.embedding_dim << " mlp=" << join(s.mlp_hidden)
     << " adgate=" << (s.adgate ? join(s.adgate_hidden) : std::string("off")) << " aux=" << (s.aux_head ? 1 : 0)
     << " groups=" << s.groups << " cards=" << join(cards);
  return os.str();
}

ModelSpec parse_spec_line(std::string_view line) {
  auto toks = split_ws(line);
  if (toks.size() != 7) throw ParseError(2, "malformed model line");
  ModelSpec s;
  try {
    s.backbone = parse_backbone(toks[0]);
  } catch (const ConfigError& e) {
    throw ParseError(2, e.what());
  }
  auto value = [&](std::size_t i, std::string_view key) {
    auto t = toks[i];
    if (t.substr(0, key.size()) != key || t.size() <= key.size() || t[key.size()] != '=')
      throw ParseError(2, "expected " + std::string(key) + "=...");
    return t.substr(key.size() + 1);
  };
  auto one = [](std::string_view v) {
    auto xs = parse_list<std::size_t>(v);
    if (xs.size() != 1) throw ParseError(2, "expected a single value");
    return xs[0];
  };
  s.embedding_dim = one(value(1, "dim"));
  s.mlp_hidden = parse_list<std::size_t>(value(2, "mlp"));
  const auto gate = value(3, "adgate");
  s.adgate = gate != "off";
  if (s.adgate) s.adgate_hidden = parse_list<std::size_t>(gate);
  s.aux_head = one(value(4, "aux")) != 0;
  s.groups = static_cast<std::uint32_t>(one(value(5, "groups")));
  s.cardinalities = parse_list<std::uint32_t>(value(6, "cards"));
  try {
    s.validate();
  } catch (const ConfigError& e) {
    throw ParseError(2, e.what());
  }
  return s;
}

void write_section(std::ostream& out, std::string_view name, std::span<const double> values) {
  out << name << ' ' << values.size() << '\n';
  char buf[32];
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", values[i]);
    if (i) out << ' ';
    out << buf;
  }
  out << '\n';
}

void write_params(const ModelParams& params, std::ostream& out, bool terminate) {
  out << kCheckpointMagic << '\n' << spec_line(params.spec) << '\n';
  for (const auto& [name, block] : params.layout.sections()) write_section(out, name, params.block(block));
  if (terminate) out << "end\n";
}

void write_params(const ModelParams& params, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_params(params, out);
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

const std::vector<double>* CheckpointSections::find(std::string_view name) const {
  for (const auto& [n, v] : sections)
    if (n == name) return &v;
  return nullptr;
}

CheckpointSections read_checkpoint_sections(std::istream& in) {
  CheckpointSections file;
  std::string line;
  std::size_t lineno = 0;
  auto next = [&]() -> bool {
    if (!std::getline(in, line)) return false;
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return true;
  };
  if (!next()) throw ParseError(1, "empty checkpoint");
  if (line != kCheckpointMagic) {
    if (line.rfind("CLSDCKPT", 0) == 0) throw ParseError(1, "unsupported checkpoint version '" + line + "'");
    throw ParseError(1, "not a checkpoint file");
  }
  if (!next()) throw ParseError(2, "truncated checkpoint: missing model line");
  file.spec = parse_spec_line(line);

  bool ended = false;
  while (next()) {
    if (line == "end") {
      ended = true;
      break;
    }
    auto head = split_ws(line);
    if (head.size() != 2) throw ParseError(lineno, "expected 'name count'");
    std::size_t count = 0;
    auto [p, ec] = std::from_chars(head[1].data(), head[1].data() + head[1].size(), count);
    if (ec != std::errc() || p != head[1].data() + head[1].size()) throw ParseError(lineno, "bad section size");
    const std::string name(head[0]);
    if (!next()) throw ParseError(lineno + 1, "truncated checkpoint: section '" + name + "' has no values");
    auto toks = split_ws(line);
    if (toks.size() != count)
      throw ParseError(lineno, "section '" + name + "' expects " + std::to_string(count) + " values, found " +
                                   std::to_string(toks.size()));
    std::vector<double> values;
    values.reserve(count);
    for (auto t : toks) {
      double v = 0.0;
      auto [q, ec2] = std::from_chars(t.data(), t.data() + t.size(), v);
      if (ec2 != std::errc() || q != t.data() + t.size()) throw ParseError(lineno, "bad number '" + std::string(t) + "'");
      values.push_back(v);
    }
    file.sections.emplace_back(name, std::move(values));
  }
  if (!ended) throw ParseError(lineno, "truncated checkpoint: missing end marker");
  return file;
}

ModelParams params_from_sections(const CheckpointSections& file) {
  ModelParams params(file.spec);
  for (const auto& [name, block] : params.layout.sections()) {
    const auto* values = file.find(name);
    if (!values) throw ParseError(0, "checkpoint missing section '" + name + "'");
    if (values->size() != block.size)
      throw ParseError(0, "section '" + name + "' has " + std::to_string(values->size()) + " values, model needs " +
                              std::to_string(block.size));
    std::copy(values->begin(), values->end(), params.values.begin() + static_cast<std::ptrdiff_t>(block.offset));
  }
  return params;
}

ModelParams read_params(std::istream& in) { return params_from_sections(read_checkpoint_sections(in)); }

ModelParams read_params(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return read_params(in);
}

}  // namespace clsd
