#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <vector>

namespace gazeqa {

/// Row-major [rows x cols] matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double* row(std::size_t r) { return data.data() + r * cols; }
  const double* row(std::size_t r) const { return data.data() + r * cols; }
  double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

/// Named parameter with a gradient buffer of the same shape.
struct Tensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> value;
  std::vector<double> grad;

  Tensor() = default;
  Tensor(std::string n, std::vector<std::size_t> s) : name(std::move(n)), shape(std::move(s)) {
    std::size_t total = 1;
    for (std::size_t d : shape) total *= d;
    value.assign(total, 0.0);
    grad.assign(total, 0.0);
  }

  std::size_t size() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

struct Tokenization {
  std::vector<int> ids;              // token ids, one run per word, concatenated
  std::vector<int> tokens_per_word;  // how many of ids each input word produced
};

struct EncodeResult {
  Matrix states;                     // final-layer vector per token
  std::size_t summary_position = 0;  // which row is the sequence summary

  const double* summary() const { return states.row(summary_position); }
};

/// What the pipeline requires of any encoder: deterministic per-token final
/// embeddings plus a sequence-summary vector, and a tokenizer that reports
/// how many tokens each word produced.
class Encoder {
 public:
  virtual ~Encoder() = default;

  virtual Tokenization tokenize(const std::vector<std::string>& words) const = 0;
  virtual EncodeResult encode(const std::vector<int>& ids) const = 0;

  virtual int dim() const = 0;
  virtual int max_len() const = 0;
  virtual const std::string& id() const = 0;

  virtual int summary_token_id() const = 0;
  virtual int separator_token_id() const = 0;
};

/// Cached activations from one forward pass, consumed by backward().
struct ForwardTrace {
  virtual ~ForwardTrace() = default;
  Matrix states;
  std::size_t summary_position = 0;
};

/// An encoder whose parameters can be read, updated and backpropagated
/// through. Gradients accumulate into Tensor::grad.
class TrainableEncoder : public Encoder {
 public:
  virtual std::vector<Tensor*> parameters() = 0;
  virtual std::vector<const Tensor*> parameters() const = 0;

  virtual std::unique_ptr<ForwardTrace> forward(const std::vector<int>& ids) const = 0;
  virtual void backward(const ForwardTrace& trace, const Matrix& d_states) = 0;

  virtual std::unique_ptr<TrainableEncoder> clone() const = 0;

  void zero_grad() {
    for (Tensor* t : parameters()) t->zero_grad();
  }
};

}  // namespace gazeqa
