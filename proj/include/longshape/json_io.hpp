/// JSON serialization of model parameters, latent states, dataset manifests,
/// simulation truth files and SAEM checkpoints. nlohmann::json prints doubles
/// with shortest-round-trip precision, so every numeric value survives a
/// write/read cycle exactly; meshes live in separate .shape files.
#pragma once

#include "longshape/estimator.hpp"
#include "longshape/model.hpp"
#include "longshape/shape_io.hpp"
#include "longshape/types.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace longshape {

using Json = nlohmann::json;

inline Json matrix_to_json(const Mat& m) {
  Json rows = Json::array();
  for (int r = 0; r < m.rows(); ++r) {
    Json row = Json::array();
    for (int c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Mat matrix_from_json(const Json& j, const std::string& what) {
  if (!j.is_array()) throw DataError(what + ": expected an array of rows");
  const int rows = static_cast<int>(j.size());
  if (rows == 0) return Mat(0, 0);
  if (!j[0].is_array()) throw DataError(what + ": expected nested arrays");
  const int cols = static_cast<int>(j[0].size());
  Mat m(rows, cols);
  for (int r = 0; r < rows; ++r) {
    if (!j[r].is_array() || static_cast<int>(j[r].size()) != cols)
      throw DataError(what + ": ragged rows");
    for (int c = 0; c < cols; ++c) {
      if (!j[r][c].is_number()) throw DataError(what + ": non-numeric entry");
      m(r, c) = j[r][c].get<double>();
    }
  }
  return m;
}

inline Json vector_to_json(const Vec& v) {
  Json a = Json::array();
  for (int i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

inline Vec vector_from_json(const Json& j, const std::string& what) {
  if (!j.is_array()) throw DataError(what + ": expected an array");
  Vec v(static_cast<int>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw DataError(what + ": non-numeric entry");
    v(static_cast<int>(i)) = j[i].get<double>();
  }
  return v;
}

inline Json shape_to_json(const Shape& s) {
  Json j;
  j["dim"] = s.dim;
  j["vertices"] = matrix_to_json(s.vertices);
  Json cells = Json::array();
  for (int c = 0; c < s.n_cells(); ++c) {
    Json row = Json::array();
    for (int k = 0; k < s.cells.cols(); ++k) row.push_back(s.cells(c, k));
    cells.push_back(std::move(row));
  }
  j["cells"] = cells;
  return j;
}

inline Shape shape_from_json(const Json& j, const std::string& what) {
  Shape s;
  s.dim = j.at("dim").get<int>();
  s.vertices = matrix_from_json(j.at("vertices"), what + ".vertices");
  const Json& cells = j.at("cells");
  const int verts_per_cell = s.dim == 2 ? 2 : 3;
  s.cells.resize(static_cast<int>(cells.size()), verts_per_cell);
  for (std::size_t c = 0; c < cells.size(); ++c)
    for (int k = 0; k < verts_per_cell; ++k)
      s.cells(static_cast<int>(c), k) = cells[c][static_cast<std::size_t>(k)].get<int>();
  s.validate();
  return s;
}

// --- model parameters -------------------------------------------------------

/// The scalar and small-array fixed effects; the template mesh is stored in a
/// sibling .shape file named by "template_file".
inline Json params_to_json(const ModelParams& p, const std::string& template_file) {
  Json j;
  j["template_file"] = template_file;
  j["control_points"] = matrix_to_json(p.mean_control_points);
  j["momenta"] = matrix_to_json(p.mean_momenta);
  j["mixing"] = matrix_to_json(p.mean_mixing);
  j["reference_time"] = p.reference_time;
  j["var_time_shift"] = p.var_time_shift;
  j["var_log_accel"] = p.var_log_accel;
  j["var_noise"] = p.var_noise;
  return j;
}

inline void write_params(const ModelParams& p, const std::filesystem::path& dir,
                         const std::string& stem) {
  std::filesystem::create_directories(dir);
  const std::string mesh_name = stem + "_template.shape";
  write_shape(p.mean_template, (dir / mesh_name).string());
  std::ofstream os(dir / (stem + "_params.json"));
  if (!os) throw DataError("cannot write parameters to " + (dir / stem).string());
  os << params_to_json(p, mesh_name).dump(2) << '\n';
}

inline ModelParams read_params(const std::filesystem::path& params_json) {
  std::ifstream is(params_json);
  if (!is) throw DataError("cannot open parameter file " + params_json.string());
  Json j;
  try {
    is >> j;
  } catch (const Json::exception& e) {
    throw DataError("malformed parameter file " + params_json.string() + ": " + e.what());
  }
  ModelParams p;
  p.mean_template = read_shape((params_json.parent_path() / j.at("template_file").get<std::string>()).string());
  p.mean_control_points = matrix_from_json(j.at("control_points"), "control_points");
  p.mean_momenta = matrix_from_json(j.at("momenta"), "momenta");
  p.mean_mixing = matrix_from_json(j.at("mixing"), "mixing");
  p.reference_time = j.at("reference_time").get<double>();
  p.var_time_shift = j.at("var_time_shift").get<double>();
  p.var_log_accel = j.at("var_log_accel").get<double>();
  p.var_noise = j.at("var_noise").get<double>();
  p.validate();
  return p;
}

// --- individual latents ------------------------------------------------------

inline Json latents_to_json(const std::vector<IndividualLatents>& latents,
                            const std::vector<std::string>& ids) {
  Json arr = Json::array();
  for (std::size_t i = 0; i < latents.size(); ++i) {
    Json j;
    j["id"] = i < ids.size() ? ids[i] : std::to_string(i);
    j["onset_age"] = latents[i].onset_age;
    j["log_acceleration"] = latents[i].log_acceleration;
    j["sources"] = vector_to_json(latents[i].sources);
    arr.push_back(std::move(j));
  }
  return arr;
}

inline std::vector<IndividualLatents> latents_from_json(const Json& arr) {
  std::vector<IndividualLatents> out;
  for (const Json& j : arr) {
    IndividualLatents ind;
    ind.onset_age = j.at("onset_age").get<double>();
    ind.log_acceleration = j.at("log_acceleration").get<double>();
    ind.sources = vector_from_json(j.at("sources"), "sources");
    out.push_back(std::move(ind));
  }
  return out;
}

/// Truth file: generating parameters plus the generated latents, in the same
/// layout as an estimated parameter set so scoring is a file-level diff.
inline void write_truth(const ModelParams& truth, const std::vector<IndividualLatents>& latents,
                        const std::vector<std::string>& ids, const std::filesystem::path& dir) {
  write_params(truth, dir, "truth");
  Json j;
  j["latents"] = latents_to_json(latents, ids);
  std::ofstream os(dir / "truth_latents.json");
  os << j.dump(2) << '\n';
}

// --- dataset manifest --------------------------------------------------------

/// Writes every observation mesh plus manifest.json into `dir`.
inline void write_dataset(const LongitudinalDataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  Json manifest;
  manifest["ambient_dim"] = dataset.ambient_dim;
  Json subjects = Json::array();
  for (const Subject& s : dataset.subjects) {
    Json subject;
    subject["id"] = s.id;
    Json obs = Json::array();
    for (std::size_t j = 0; j < s.observations.size(); ++j) {
      const std::string mesh_name = s.id + "_obs" + std::to_string(j) + ".shape";
      write_shape(s.observations[j].shape, (dir / mesh_name).string());
      Json o;
      o["time"] = s.observations[j].time;
      o["mesh"] = mesh_name;
      obs.push_back(std::move(o));
    }
    subject["observations"] = obs;
    subjects.push_back(std::move(subject));
  }
  manifest["subjects"] = subjects;
  std::ofstream os(dir / "manifest.json");
  if (!os) throw DataError("cannot write manifest to " + dir.string());
  os << manifest.dump(2) << '\n';
}

/// Reads a manifest and every referenced mesh; validates the dataset.
inline LongitudinalDataset read_dataset(const std::filesystem::path& manifest_path) {
  std::ifstream is(manifest_path);
  if (!is) throw DataError("cannot open manifest " + manifest_path.string());
  Json manifest;
  try {
    is >> manifest;
  } catch (const Json::exception& e) {
    throw DataError("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  LongitudinalDataset dataset;
  try {
    dataset.ambient_dim = manifest.at("ambient_dim").get<int>();
    for (const Json& subject : manifest.at("subjects")) {
      Subject s;
      s.id = subject.at("id").get<std::string>();
      for (const Json& o : subject.at("observations")) {
        Observation obs;
        obs.time = o.at("time").get<double>();
        obs.shape =
            read_shape((manifest_path.parent_path() / o.at("mesh").get<std::string>()).string());
        s.observations.push_back(std::move(obs));
      }
      dataset.subjects.push_back(std::move(s));
    }
  } catch (const Json::exception& e) {
    throw DataError("manifest " + manifest_path.string() + ": " + e.what());
  }
  dataset.validate();
  return dataset;
}

// --- checkpoints --------------------------------------------------------------

inline Json saem_state_to_json(const SaemState& s) {
  Json j;
  j["format_version"] = 1;
  j["iteration"] = s.iteration;
  j["temperature"] = s.temperature;
  j["rho"] = s.rho;
  j["population"]["template"] = shape_to_json(s.z.population.template_shape);
  j["population"]["control_points"] = matrix_to_json(s.z.population.control_points);
  j["population"]["momenta"] = matrix_to_json(s.z.population.momenta);
  j["population"]["mixing"] = matrix_to_json(s.z.population.mixing);
  j["individuals"] = latents_to_json(s.z.individuals, {});
  j["params"] = params_to_json(s.params, "");
  j["params"]["template"] = shape_to_json(s.params.mean_template);
  j["stats"]["s1"] = matrix_to_json(s.stats.s1);
  j["stats"]["s2"] = matrix_to_json(s.stats.s2);
  j["stats"]["s3"] = matrix_to_json(s.stats.s3);
  j["stats"]["s4"] = matrix_to_json(s.stats.s4);
  j["stats"]["s5"] = s.stats.s5;
  j["stats"]["s6"] = s.stats.s6;
  j["stats"]["s7"] = s.stats.s7;
  j["stats"]["s8"] = s.stats.s8;
  j["template_proposal_points"] = matrix_to_json(s.template_proposal_points);
  j["block_sigmas"] = s.block_sigmas;
  Json histories = Json::array();
  for (const auto& h : s.block_histories) {
    Json one = Json::array();
    for (char c : h) one.push_back(static_cast<int>(c));
    histories.push_back(std::move(one));
  }
  j["block_histories"] = histories;
  j["proposal_rng"] = s.proposal_rng;
  j["accept_rng"] = s.accept_rng;
  return j;
}

inline SaemState saem_state_from_json(const Json& j) {
  SaemState s;
  s.iteration = j.at("iteration").get<int>();
  s.temperature = j.at("temperature").get<double>();
  s.rho = j.at("rho").get<double>();
  s.z.population.template_shape = shape_from_json(j.at("population").at("template"), "template");
  s.z.population.control_points =
      matrix_from_json(j.at("population").at("control_points"), "control_points");
  s.z.population.momenta = matrix_from_json(j.at("population").at("momenta"), "momenta");
  s.z.population.mixing = matrix_from_json(j.at("population").at("mixing"), "mixing");
  s.z.individuals = latents_from_json(j.at("individuals"));
  const Json& p = j.at("params");
  s.params.mean_template = shape_from_json(p.at("template"), "params.template");
  s.params.mean_control_points = matrix_from_json(p.at("control_points"), "params.control_points");
  s.params.mean_momenta = matrix_from_json(p.at("momenta"), "params.momenta");
  s.params.mean_mixing = matrix_from_json(p.at("mixing"), "params.mixing");
  s.params.reference_time = p.at("reference_time").get<double>();
  s.params.var_time_shift = p.at("var_time_shift").get<double>();
  s.params.var_log_accel = p.at("var_log_accel").get<double>();
  s.params.var_noise = p.at("var_noise").get<double>();
  const Json& st = j.at("stats");
  s.stats.s1 = matrix_from_json(st.at("s1"), "s1");
  s.stats.s2 = matrix_from_json(st.at("s2"), "s2");
  s.stats.s3 = matrix_from_json(st.at("s3"), "s3");
  s.stats.s4 = matrix_from_json(st.at("s4"), "s4");
  s.stats.s5 = st.at("s5").get<double>();
  s.stats.s6 = st.at("s6").get<double>();
  s.stats.s7 = st.at("s7").get<double>();
  s.stats.s8 = st.at("s8").get<double>();
  s.template_proposal_points =
      matrix_from_json(j.at("template_proposal_points"), "template_proposal_points");
  s.block_sigmas = j.at("block_sigmas").get<std::vector<double>>();
  for (const Json& one : j.at("block_histories")) {
    std::vector<char> h;
    for (const Json& v : one) h.push_back(static_cast<char>(v.get<int>()));
    s.block_histories.push_back(std::move(h));
  }
  s.proposal_rng = j.at("proposal_rng").get<std::string>();
  s.accept_rng = j.at("accept_rng").get<std::string>();
  return s;
}

inline void write_checkpoint(const SaemState& s, const std::filesystem::path& path) {
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  std::ofstream os(path);
  if (!os) throw DataError("cannot write checkpoint " + path.string());
  os << saem_state_to_json(s).dump() << '\n';
}

inline SaemState read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open checkpoint " + path.string());
  Json j;
  try {
    is >> j;
  } catch (const Json::exception& e) {
    throw DataError("malformed checkpoint " + path.string() + ": " + e.what());
  }
  return saem_state_from_json(j);
}

// --- CSV ----------------------------------------------------------------------

inline std::string csv_join(const std::vector<std::string>& cells) {
  std::string line;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) line += ',';
    line += cells[i];
  }
  return line;
}

inline std::string csv_number(double v) { return detail::format_double(v); }

}  // namespace longshape
