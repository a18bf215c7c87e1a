#include "gazeqa/tiny_encoder.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <sstream>

#include "gazeqa/errors.hpp"

namespace gazeqa {

namespace {

constexpr double kInitStd = 0.08;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_grad(double x) {
  constexpr double inv_sqrt_2pi = 0.3989422804014327;
  return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

struct LnCache {
  Matrix xhat;
  std::vector<double> rstd;
};

void layer_norm_forward(const Matrix& x, const Tensor& gain, const Tensor& bias, Matrix& out,
                        LnCache& cache) {
  const std::size_t T = x.rows, d = x.cols;
  out = Matrix(T, d);
  cache.xhat = Matrix(T, d);
  cache.rstd.assign(T, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    const double* xr = x.row(t);
    double mean = 0.0;
    for (std::size_t i = 0; i < d; ++i) mean += xr[i];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      double c = xr[i] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    double rstd = 1.0 / std::sqrt(var + 1e-5);
    cache.rstd[t] = rstd;
    for (std::size_t i = 0; i < d; ++i) {
      double xhat = (xr[i] - mean) * rstd;
      cache.xhat.at(t, i) = xhat;
      out.at(t, i) = gain.value[i] * xhat + bias.value[i];
    }
  }
}

// Returns gradient w.r.t. the layer-norm input; parameter gradients accumulate.
Matrix layer_norm_backward(const Matrix& d_out, const LnCache& cache, Tensor& gain, Tensor& bias) {
  const std::size_t T = d_out.rows, d = d_out.cols;
  Matrix d_x(T, d);
  for (std::size_t t = 0; t < T; ++t) {
    double mean_dxhat = 0.0;
    double mean_dxhat_xhat = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      double dn = d_out.at(t, i);
      double xhat = cache.xhat.at(t, i);
      gain.grad[i] += dn * xhat;
      bias.grad[i] += dn;
      double dxhat = dn * gain.value[i];
      mean_dxhat += dxhat;
      mean_dxhat_xhat += dxhat * xhat;
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    for (std::size_t i = 0; i < d; ++i) {
      double dxhat = d_out.at(t, i) * gain.value[i];
      d_x.at(t, i) = cache.rstd[t] * (dxhat - mean_dxhat - cache.xhat.at(t, i) * mean_dxhat_xhat);
    }
  }
  return d_x;
}

// y[t, j] = sum_i W[j, i] * x[t, i], W stored [out, in].
void linear_forward(const Matrix& x, const Tensor& w, const Tensor* b, Matrix& y) {
  const std::size_t T = x.rows, in = x.cols, out = w.shape[0];
  y = Matrix(T, out);
  for (std::size_t t = 0; t < T; ++t) {
    const double* xr = x.row(t);
    double* yr = y.row(t);
    for (std::size_t j = 0; j < out; ++j) {
      const double* wr = w.value.data() + j * in;
      double acc = b ? b->value[j] : 0.0;
      for (std::size_t i = 0; i < in; ++i) acc += wr[i] * xr[i];
      yr[j] = acc;
    }
  }
}

// Accumulates dW (and db), returns gradient w.r.t. x.
Matrix linear_backward(const Matrix& d_y, const Matrix& x, Tensor& w, Tensor* b) {
  const std::size_t T = x.rows, in = x.cols, out = w.shape[0];
  Matrix d_x(T, in);
  for (std::size_t t = 0; t < T; ++t) {
    const double* dyr = d_y.row(t);
    const double* xr = x.row(t);
    double* dxr = d_x.row(t);
    for (std::size_t j = 0; j < out; ++j) {
      const double dy = dyr[j];
      if (b) b->grad[j] += dy;
      double* dwr = w.grad.data() + j * in;
      const double* wr = w.value.data() + j * in;
      for (std::size_t i = 0; i < in; ++i) {
        dwr[i] += dy * xr[i];
        dxr[i] += dy * wr[i];
      }
    }
  }
  return d_x;
}

struct LayerCache {
  LnCache ln1;
  Matrix n1;
  Matrix q, k, v;
  std::vector<Matrix> att;  // per head, [T, T]
  Matrix ctx;
  LnCache ln2;
  Matrix n2;
  Matrix f1, a1;
};

struct TinyTrace final : ForwardTrace {
  std::vector<int> ids;
  std::vector<LayerCache> layers;
  LnCache lnf;
};

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

std::string TinyEncoderConfig::spec_string() const {
  std::ostringstream os;
  os << "tiny:dim=" << dim << ",layers=" << layers << ",heads=" << heads << ",ffn=" << ffn_mult
     << ",vocab=" << vocab << ",max_len=" << max_len << ",piece=" << piece_chars
     << ",seed=" << seed;
  return os.str();
}

TinyEncoderConfig parse_tiny_encoder_spec(const std::string& spec) {
  if (spec.rfind("tiny", 0) != 0) {
    throw ParseError("encoder spec must start with 'tiny', got '" + spec + "'");
  }
  TinyEncoderConfig config;
  if (spec.size() <= 5) return config;
  std::stringstream args(spec.substr(5));
  std::string item;
  while (std::getline(args, item, ',')) {
    auto eq = item.find('=');
    if (eq == std::string::npos) throw ParseError("encoder spec entry '" + item + "' is not key=value");
    std::string key = item.substr(0, eq);
    std::string value = item.substr(eq + 1);
    try {
      if (key == "dim") config.dim = std::stoi(value);
      else if (key == "layers") config.layers = std::stoi(value);
      else if (key == "heads") config.heads = std::stoi(value);
      else if (key == "ffn") config.ffn_mult = std::stoi(value);
      else if (key == "vocab") config.vocab = std::stoi(value);
      else if (key == "max_len") config.max_len = std::stoi(value);
      else if (key == "piece") config.piece_chars = std::stoi(value);
      else if (key == "seed") config.seed = std::stoull(value);
      else throw ParseError("unknown encoder spec key '" + key + "'");
    } catch (const std::invalid_argument&) {
      throw ParseError("encoder spec value '" + value + "' for key '" + key + "' is not a number");
    }
  }
  if (config.dim <= 0 || config.layers <= 0 || config.heads <= 0 || config.vocab <= 2 ||
      config.max_len <= 0 || config.piece_chars <= 0 || config.ffn_mult <= 0) {
    throw ParseError("encoder spec '" + spec + "' has a non-positive dimension");
  }
  if (config.dim % config.heads != 0) {
    throw ParseError("encoder dim " + std::to_string(config.dim) + " not divisible by heads " +
                     std::to_string(config.heads));
  }
  return config;
}

TinyEncoder::TinyEncoder(const TinyEncoderConfig& config) : config_(config), id_(config.spec_string()) {
  const std::size_t d = static_cast<std::size_t>(config.dim);
  const std::size_t f = d * static_cast<std::size_t>(config.ffn_mult);
  tok_emb_ = Tensor("tok_emb", {static_cast<std::size_t>(config.vocab), d});
  pos_emb_ = Tensor("pos_emb", {static_cast<std::size_t>(config.max_len), d});
  lnf_gain_ = Tensor("lnf_gain", {d});
  lnf_bias_ = Tensor("lnf_bias", {d});
  layers_.resize(static_cast<std::size_t>(config.layers));
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    std::string p = "layer" + std::to_string(l) + ".";
    LayerParams& lp = layers_[l];
    lp.ln1_gain = Tensor(p + "ln1_gain", {d});
    lp.ln1_bias = Tensor(p + "ln1_bias", {d});
    lp.wq = Tensor(p + "wq", {d, d});
    lp.wk = Tensor(p + "wk", {d, d});
    lp.wv = Tensor(p + "wv", {d, d});
    lp.wo = Tensor(p + "wo", {d, d});
    lp.ln2_gain = Tensor(p + "ln2_gain", {d});
    lp.ln2_bias = Tensor(p + "ln2_bias", {d});
    lp.w1 = Tensor(p + "w1", {f, d});
    lp.b1 = Tensor(p + "b1", {f});
    lp.w2 = Tensor(p + "w2", {d, f});
    lp.b2 = Tensor(p + "b2", {d});
  }

  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> dist(0.0, kInitStd);
  auto fill = [&](Tensor& t) {
    for (double& v : t.value) v = dist(rng);
  };
  auto ones = [](Tensor& t) { std::fill(t.value.begin(), t.value.end(), 1.0); };
  fill(tok_emb_);
  fill(pos_emb_);
  for (LayerParams& lp : layers_) {
    ones(lp.ln1_gain);
    fill(lp.wq);
    fill(lp.wk);
    fill(lp.wv);
    fill(lp.wo);
    ones(lp.ln2_gain);
    fill(lp.w1);
    fill(lp.w2);
  }
  ones(lnf_gain_);
}

int TinyEncoder::piece_id(const std::string& piece) const {
  return 2 + static_cast<int>(fnv1a(piece) % static_cast<std::uint64_t>(config_.vocab - 2));
}

Tokenization TinyEncoder::tokenize(const std::vector<std::string>& words) const {
  Tokenization tk;
  const std::size_t piece = static_cast<std::size_t>(config_.piece_chars);
  for (const std::string& word : words) {
    int count = 0;
    if (word.empty()) {
      tk.ids.push_back(piece_id(word));
      count = 1;
    } else {
      for (std::size_t off = 0; off < word.size(); off += piece) {
        tk.ids.push_back(piece_id(word.substr(off, piece)));
        ++count;
      }
    }
    tk.tokens_per_word.push_back(count);
  }
  return tk;
}

std::unique_ptr<ForwardTrace> TinyEncoder::forward(const std::vector<int>& ids) const {
  const std::size_t T = ids.size();
  const std::size_t d = static_cast<std::size_t>(config_.dim);
  if (T == 0) throw ValidationError("encoder: empty token sequence");
  if (T > static_cast<std::size_t>(config_.max_len)) {
    throw ValidationError("encoder: sequence length " + std::to_string(T) + " exceeds max_len " +
                          std::to_string(config_.max_len));
  }
  for (int id : ids) {
    if (id < 0 || id >= config_.vocab) {
      throw ValidationError("encoder: token id " + std::to_string(id) + " outside vocab");
    }
  }

  auto trace = std::make_unique<TinyTrace>();
  trace->ids = ids;
  trace->summary_position = 0;

  Matrix x(T, d);
  for (std::size_t t = 0; t < T; ++t) {
    const double* tok = tok_emb_.value.data() + static_cast<std::size_t>(ids[t]) * d;
    const double* pos = pos_emb_.value.data() + t * d;
    double* xr = x.row(t);
    for (std::size_t i = 0; i < d; ++i) xr[i] = tok[i] + pos[i];
  }

  const int H = config_.heads;
  const std::size_t dh = d / static_cast<std::size_t>(H);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  trace->layers.resize(layers_.size());
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const LayerParams& lp = layers_[l];
    LayerCache& cache = trace->layers[l];

    layer_norm_forward(x, lp.ln1_gain, lp.ln1_bias, cache.n1, cache.ln1);
    linear_forward(cache.n1, lp.wq, nullptr, cache.q);
    linear_forward(cache.n1, lp.wk, nullptr, cache.k);
    linear_forward(cache.n1, lp.wv, nullptr, cache.v);

    cache.att.assign(static_cast<std::size_t>(H), Matrix(T, T));
    cache.ctx = Matrix(T, d);
    for (int h = 0; h < H; ++h) {
      const std::size_t base = static_cast<std::size_t>(h) * dh;
      Matrix& att = cache.att[static_cast<std::size_t>(h)];
      for (std::size_t t = 0; t < T; ++t) {
        double max_score = -1e300;
        for (std::size_t s = 0; s < T; ++s) {
          double score = 0.0;
          for (std::size_t c = 0; c < dh; ++c) {
            score += cache.q.at(t, base + c) * cache.k.at(s, base + c);
          }
          score *= scale;
          att.at(t, s) = score;
          max_score = std::max(max_score, score);
        }
        double denom = 0.0;
        for (std::size_t s = 0; s < T; ++s) {
          double e = std::exp(att.at(t, s) - max_score);
          att.at(t, s) = e;
          denom += e;
        }
        for (std::size_t s = 0; s < T; ++s) att.at(t, s) /= denom;
        for (std::size_t c = 0; c < dh; ++c) {
          double acc = 0.0;
          for (std::size_t s = 0; s < T; ++s) acc += att.at(t, s) * cache.v.at(s, base + c);
          cache.ctx.at(t, base + c) = acc;
        }
      }
    }

    Matrix ao;
    linear_forward(cache.ctx, lp.wo, nullptr, ao);
    for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] += ao.data[i];

    layer_norm_forward(x, lp.ln2_gain, lp.ln2_bias, cache.n2, cache.ln2);
    linear_forward(cache.n2, lp.w1, &lp.b1, cache.f1);
    cache.a1 = Matrix(cache.f1.rows, cache.f1.cols);
    for (std::size_t i = 0; i < cache.f1.data.size(); ++i) cache.a1.data[i] = gelu(cache.f1.data[i]);
    Matrix f2;
    linear_forward(cache.a1, lp.w2, &lp.b2, f2);
    for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] += f2.data[i];
  }

  layer_norm_forward(x, lnf_gain_, lnf_bias_, trace->states, trace->lnf);
  return trace;
}

EncodeResult TinyEncoder::encode(const std::vector<int>& ids) const {
  auto trace = forward(ids);
  EncodeResult result;
  result.states = std::move(trace->states);
  result.summary_position = trace->summary_position;
  return result;
}

void TinyEncoder::backward(const ForwardTrace& trace_base, const Matrix& d_states) {
  const auto& trace = dynamic_cast<const TinyTrace&>(trace_base);
  const std::size_t T = trace.ids.size();
  const std::size_t d = static_cast<std::size_t>(config_.dim);
  if (d_states.rows != T || d_states.cols != d) {
    throw ValidationError("encoder backward: gradient shape mismatch");
  }

  const int H = config_.heads;
  const std::size_t dh = d / static_cast<std::size_t>(H);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix d_x = layer_norm_backward(d_states, trace.lnf, lnf_gain_, lnf_bias_);

  for (std::size_t l = layers_.size(); l-- > 0;) {
    LayerParams& lp = layers_[l];
    const LayerCache& cache = trace.layers[l];

    // Feed-forward block; the residual passes d_x through unchanged.
    Matrix d_a1 = linear_backward(d_x, cache.a1, lp.w2, &lp.b2);
    Matrix d_f1(T, d_a1.cols);
    for (std::size_t i = 0; i < d_f1.data.size(); ++i) {
      d_f1.data[i] = d_a1.data[i] * gelu_grad(cache.f1.data[i]);
    }
    Matrix d_n2 = linear_backward(d_f1, cache.n2, lp.w1, &lp.b1);
    Matrix d_ln2 = layer_norm_backward(d_n2, cache.ln2, lp.ln2_gain, lp.ln2_bias);
    for (std::size_t i = 0; i < d_x.data.size(); ++i) d_x.data[i] += d_ln2.data[i];

    // Attention block.
    Matrix d_ctx = linear_backward(d_x, cache.ctx, lp.wo, nullptr);
    Matrix d_q(T, d), d_k(T, d), d_v(T, d);
    for (int h = 0; h < H; ++h) {
      const std::size_t base = static_cast<std::size_t>(h) * dh;
      const Matrix& att = cache.att[static_cast<std::size_t>(h)];
      Matrix d_att(T, T);
      for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t s = 0; s < T; ++s) {
          double acc = 0.0;
          for (std::size_t c = 0; c < dh; ++c) acc += d_ctx.at(t, base + c) * cache.v.at(s, base + c);
          d_att.at(t, s) = acc;
        }
        for (std::size_t c = 0; c < dh; ++c) {
          const double dc = d_ctx.at(t, base + c);
          for (std::size_t s = 0; s < T; ++s) d_v.at(s, base + c) += att.at(t, s) * dc;
        }
        double row_dot = 0.0;
        for (std::size_t s = 0; s < T; ++s) row_dot += d_att.at(t, s) * att.at(t, s);
        for (std::size_t s = 0; s < T; ++s) {
          const double d_score = att.at(t, s) * (d_att.at(t, s) - row_dot) * scale;
          for (std::size_t c = 0; c < dh; ++c) {
            d_q.at(t, base + c) += d_score * cache.k.at(s, base + c);
            d_k.at(s, base + c) += d_score * cache.q.at(t, base + c);
          }
        }
      }
    }
    Matrix d_n1 = linear_backward(d_q, cache.n1, lp.wq, nullptr);
    Matrix d_n1_k = linear_backward(d_k, cache.n1, lp.wk, nullptr);
    Matrix d_n1_v = linear_backward(d_v, cache.n1, lp.wv, nullptr);
    for (std::size_t i = 0; i < d_n1.data.size(); ++i) d_n1.data[i] += d_n1_k.data[i] + d_n1_v.data[i];
    Matrix d_ln1 = layer_norm_backward(d_n1, cache.ln1, lp.ln1_gain, lp.ln1_bias);
    for (std::size_t i = 0; i < d_x.data.size(); ++i) d_x.data[i] += d_ln1.data[i];
  }

  for (std::size_t t = 0; t < T; ++t) {
    double* dtok = tok_emb_.grad.data() + static_cast<std::size_t>(trace.ids[t]) * d;
    double* dpos = pos_emb_.grad.data() + t * d;
    const double* dxr = d_x.row(t);
    for (std::size_t i = 0; i < d; ++i) {
      dtok[i] += dxr[i];
      dpos[i] += dxr[i];
    }
  }
}

std::vector<Tensor*> TinyEncoder::parameters() {
  std::vector<Tensor*> params{&tok_emb_, &pos_emb_};
  for (LayerParams& lp : layers_) {
    params.insert(params.end(), {&lp.ln1_gain, &lp.ln1_bias, &lp.wq, &lp.wk, &lp.wv, &lp.wo,
                                 &lp.ln2_gain, &lp.ln2_bias, &lp.w1, &lp.b1, &lp.w2, &lp.b2});
  }
  params.push_back(&lnf_gain_);
  params.push_back(&lnf_bias_);
  return params;
}

std::vector<const Tensor*> TinyEncoder::parameters() const {
  auto params = const_cast<TinyEncoder*>(this)->parameters();
  return {params.begin(), params.end()};
}

std::unique_ptr<TrainableEncoder> TinyEncoder::clone() const {
  return std::make_unique<TinyEncoder>(*this);
}

}  // namespace gazeqa
