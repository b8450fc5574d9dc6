#pragma once

#include "mvce/model.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <optional>
#include <string>

namespace mvce {

struct ModelFileError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Contents of a model file: the plant plus an optional constraint set.
struct ModelFile {
    SystemModel model;
    std::optional<PolyhedralSet> constraint;
};

namespace detail {

inline Matrix parse_matrix(const nlohmann::json& j, const std::string& key)
{
    if (!j.is_array() || j.empty() || !j.front().is_array())
        throw ModelFileError("model file: " + key + " must be a nested array (row-major)");
    const auto rows = j.size();
    const auto cols = j.front().size();
    Matrix m(rows, cols);
    for (size_t r = 0; r < rows; ++r) {
        if (!j[r].is_array() || j[r].size() != cols)
            throw ModelFileError("model file: ragged rows in " + key);
        for (size_t c = 0; c < cols; ++c) {
            double v = j[r][c].get<double>();
            if (!std::isfinite(v))
                throw ModelFileError("model file: non-finite entry in " + key);
            m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = v;
        }
    }
    return m;
}

inline Vector parse_vector(const nlohmann::json& j, const std::string& key)
{
    if (!j.is_array()) throw ModelFileError("model file: " + key + " must be an array");
    Vector v(j.size());
    for (size_t i = 0; i < j.size(); ++i) {
        double x = j[i].get<double>();
        if (!std::isfinite(x)) throw ModelFileError("model file: non-finite entry in " + key);
        v(static_cast<Eigen::Index>(i)) = x;
    }
    return v;
}

inline nlohmann::json matrix_to_json(const Matrix& m)
{
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline nlohmann::json vector_to_json(const Vector& v)
{
    nlohmann::json arr = nlohmann::json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v(i));
    return arr;
}

} // namespace detail

inline ModelFile parse_model(const nlohmann::json& j)
{
    for (const char* key : {"A", "C", "Q", "R", "prior_mean", "prior_cov"})
        if (!j.contains(key)) throw ModelFileError(std::string("model file: missing key ") + key);

    ModelFile out;
    out.model.A = detail::parse_matrix(j.at("A"), "A");
    out.model.C = detail::parse_matrix(j.at("C"), "C");
    out.model.Q = detail::parse_matrix(j.at("Q"), "Q");
    out.model.R = detail::parse_matrix(j.at("R"), "R");
    out.model.prior_mean = detail::parse_vector(j.at("prior_mean"), "prior_mean");
    out.model.prior_cov = detail::parse_matrix(j.at("prior_cov"), "prior_cov");
    if (j.contains("constraint")) {
        const auto& c = j.at("constraint");
        PolyhedralSet set;
        set.H = detail::parse_matrix(c.at("H"), "constraint.H");
        set.h = detail::parse_vector(c.at("h"), "constraint.h");
        if (set.H.rows() != set.h.size())
            throw ModelFileError("model file: constraint H rows must match h length");
        out.constraint = std::move(set);
    }
    return out;
}

inline ModelFile load_model_file(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw ModelFileError("cannot open model file: " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ModelFileError("model file " + path + ": " + e.what());
    }
    return parse_model(j);
}

inline nlohmann::json model_to_json(const SystemModel& m,
                                    const std::optional<PolyhedralSet>& constraint = {})
{
    nlohmann::json j;
    j["A"] = detail::matrix_to_json(m.A);
    j["C"] = detail::matrix_to_json(m.C);
    j["Q"] = detail::matrix_to_json(m.Q);
    j["R"] = detail::matrix_to_json(m.R);
    j["prior_mean"] = detail::vector_to_json(m.prior_mean);
    j["prior_cov"] = detail::matrix_to_json(m.prior_cov);
    if (constraint) {
        j["constraint"]["H"] = detail::matrix_to_json(constraint->H);
        j["constraint"]["h"] = detail::vector_to_json(constraint->h);
    }
    return j;
}

} // namespace mvce
