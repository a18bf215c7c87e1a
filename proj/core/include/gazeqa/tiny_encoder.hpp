#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gazeqa/encoder.hpp"

namespace gazeqa {

/// A small bidirectional transformer encoder trained from scratch: token and
/// position embeddings, pre-LN attention and feed-forward blocks, a final
/// layer norm. Position 0 holds the sequence-summary token. All math is in
/// doubles so finite-difference checks are meaningful.
struct TinyEncoderConfig {
  int dim = 16;
  int layers = 2;
  int heads = 2;
  int ffn_mult = 4;
  int vocab = 512;
  int max_len = 128;
  int piece_chars = 8;  // words longer than this split into multiple tokens
  std::uint64_t seed = 7;

  std::string spec_string() const;
};

/// Parses "tiny:dim=16,layers=2,heads=2,vocab=512,max_len=128,piece=8,seed=7".
/// Unlisted keys keep their defaults.
TinyEncoderConfig parse_tiny_encoder_spec(const std::string& spec);

class TinyEncoder final : public TrainableEncoder {
 public:
  explicit TinyEncoder(const TinyEncoderConfig& config);

  // Encoder
  Tokenization tokenize(const std::vector<std::string>& words) const override;
  EncodeResult encode(const std::vector<int>& ids) const override;
  int dim() const override { return config_.dim; }
  int max_len() const override { return config_.max_len; }
  const std::string& id() const override { return id_; }
  int summary_token_id() const override { return 0; }
  int separator_token_id() const override { return 1; }

  // TrainableEncoder
  std::vector<Tensor*> parameters() override;
  std::vector<const Tensor*> parameters() const override;
  std::unique_ptr<ForwardTrace> forward(const std::vector<int>& ids) const override;
  void backward(const ForwardTrace& trace, const Matrix& d_states) override;
  std::unique_ptr<TrainableEncoder> clone() const override;

  const TinyEncoderConfig& config() const { return config_; }

  /// Deterministic token id for one word piece.
  int piece_id(const std::string& piece) const;

 private:
  struct LayerParams {
    Tensor ln1_gain, ln1_bias;
    Tensor wq, wk, wv, wo;
    Tensor ln2_gain, ln2_bias;
    Tensor w1, b1, w2, b2;
  };

  TinyEncoderConfig config_;
  std::string id_;
  Tensor tok_emb_;  // [vocab, dim]
  Tensor pos_emb_;  // [max_len, dim]
  std::vector<LayerParams> layers_;
  Tensor lnf_gain_, lnf_bias_;
};

}  // namespace gazeqa
