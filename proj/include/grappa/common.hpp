#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace grappa {

// Row-major throughout: token tensors are stored as (batch*tokens, dim)
// blocks, so per-image slices are contiguous.
template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using Vec = Eigen::Matrix<S, 1, Eigen::Dynamic>;

using MatF = Mat<float>;
using MatD = Mat<double>;
using VecF = Vec<float>;
using VecD = Vec<double>;

/// Invalid or inconsistent configuration, CLI exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Tensor/manifest shape disagreement. A kind of configuration error.
struct ShapeError : ConfigError {
  using ConfigError::ConfigError;
};

/// A pipeline step was invoked before the artifacts it needs exist, exit code 3.
struct PrerequisiteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss or activation, exit code 4.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename S>
inline void check_finite(const Mat<S>& m, const std::string& what) {
  if (!m.allFinite()) throw DivergenceError("non-finite values in " + what);
}

/// Batch of per-layer token activations, shape (batch, tokens, dim) with the
/// class token at row 0 of every image block.
template <typename S>
struct TokenTensor {
  Mat<S> data;  // (batch*tokens, dim)
  int batch = 0;
  int tokens = 0;  // T+1
  int dim = 0;
  int layer_index = -1;

  TokenTensor() = default;
  TokenTensor(int batch_, int tokens_, int dim_, int layer = -1)
      : data(Mat<S>::Zero(batch_ * tokens_, dim_)),
        batch(batch_),
        tokens(tokens_),
        dim(dim_),
        layer_index(layer) {}

  auto image(int b) { return data.middleRows(b * tokens, tokens); }
  auto image(int b) const { return data.middleRows(b * tokens, tokens); }
};

}  // namespace grappa
