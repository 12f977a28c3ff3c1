#pragma once

// JSON tensors: {"shape": [rows, cols], "values": [row-major reals]}.

#include <string>
#include <vector>

#include "json.hpp"
#include "plinf/error.hpp"
#include "plinf/matrix.hpp"
#include "plinf/model_spec.hpp"
#include "plinf/nn.hpp"

namespace plinf {

inline nlohmann::json tensor_to_json(const double* data, Index rows, Index cols) {
  return {{"shape", {rows, cols}}, {"values", std::vector<double>(data, data + rows * cols)}};
}

inline nlohmann::json matrix_to_json(const Matrix& m) { return tensor_to_json(m.data(), m.rows(), m.cols()); }
inline nlohmann::json vector_to_json(const Vector& v) { return tensor_to_json(v.data(), v.size(), 1); }

inline std::vector<double> tensor_values(const nlohmann::json& j, Index rows, Index cols, const std::string& name) {
  const auto shape = j.at("shape").get<std::vector<Index>>();
  if (shape.size() != 2 || (rows >= 0 && shape[0] != rows) || (cols >= 0 && shape[1] != cols))
    throw DataError("tensor '" + name + "' has an unexpected shape");
  auto values = j.at("values").get<std::vector<double>>();
  if (static_cast<Index>(values.size()) != shape[0] * shape[1])
    throw DataError("tensor '" + name + "' value count does not match its shape");
  return values;
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
  const auto shape = j.at("shape").get<std::vector<Index>>();
  if (shape.size() != 2) throw DataError("tensor shape must have two entries");
  const auto values = tensor_values(j, shape[0], shape[1], "matrix");
  Matrix m(shape[0], shape[1]);
  std::copy(values.begin(), values.end(), m.data());
  return m;
}

inline Vector vector_from_json(const nlohmann::json& j) {
  const Matrix m = matrix_from_json(j);
  if (m.cols() != 1) throw DataError("expected a column tensor");
  return Eigen::Map<const Vector>(m.data(), m.rows());
}

inline nlohmann::json scaler_to_json(const FeatureScaler& s) {
  return {{"mean", vector_to_json(s.mean)}, {"scale", vector_to_json(s.scale)}};
}

inline FeatureScaler scaler_from_json(const nlohmann::json& j) {
  FeatureScaler s{vector_from_json(j.at("mean")), vector_from_json(j.at("scale"))};
  if (s.mean.size() != s.scale.size()) throw DataError("scaler mean/scale length mismatch");
  return s;
}

inline nlohmann::json views_to_json(const std::vector<nn::ParamView>& views) {
  nlohmann::json out = nlohmann::json::object();
  for (const auto& v : views) out[v.name] = tensor_to_json(v.data, v.rows, v.cols);
  return out;
}

// Fills every view from `j`; all names must be present with matching shapes.
inline void views_from_json(const std::vector<nn::ParamView>& views, const nlohmann::json& j) {
  for (const auto& v : views) {
    if (!j.contains(v.name)) throw DataError("checkpoint is missing parameter '" + v.name + "'");
    const auto values = tensor_values(j.at(v.name), v.rows, v.cols, v.name);
    std::copy(values.begin(), values.end(), v.data);
  }
}

}  // namespace plinf
