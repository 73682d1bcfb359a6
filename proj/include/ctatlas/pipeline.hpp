#pragma once

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "ctatlas/atlas.hpp"
#include "ctatlas/eval.hpp"
#include "ctatlas/fov_crop.hpp"
#include "ctatlas/nifti.hpp"
#include "ctatlas/parallel.hpp"
#include "ctatlas/register.hpp"
#include "ctatlas/transform.hpp"

namespace ctatlas {

namespace fs = std::filesystem;

// Similarity floor (negated mean descriptor distance) below which a
// registered subject is flagged and left out of the atlas.
inline constexpr double kDefaultQaThreshold = -1.3;

struct SubjectEntry {
  std::string id;
  fs::path image;
  std::optional<fs::path> labels;
  std::optional<fs::path> scores;  // sidecar; "<stem>.bpr.json" is tried when absent
  std::string phase = "portal-venous";
};

struct CropSettings {
  bool enabled = true;
  double lo = kDefaultCropLo;
  double hi = kDefaultCropHi;
  bool reference = false;  // also crop the atlas (and its labels) by its own scores
};

struct PipelineConfig {
  fs::path atlas;
  std::optional<fs::path> atlas_labels;
  std::vector<SubjectEntry> subjects;
  CropSettings crop;
  DescriptorParams descriptor;
  RegistrationLevels levels;
  fs::path output_dir;
  double qa_threshold = kDefaultQaThreshold;
  int workers = 1;

  void validate() const {
    if (atlas.empty()) throw Error(ErrorCode::Config, "atlas path is required");
    if (subjects.empty()) throw Error(ErrorCode::Config, "subject manifest is empty");
    if (crop.enabled && !(crop.lo < crop.hi)) throw Error(ErrorCode::Config, "crop range requires lo < hi");
    if (workers < 1) throw Error(ErrorCode::Config, "workers must be >= 1");
    if (!std::isfinite(qa_threshold)) throw Error(ErrorCode::Config, "qa_threshold must be finite");
    descriptor.validate();
    levels.validate();
    std::set<std::string> ids;
    std::set<fs::path> paths{atlas.lexically_normal()};
    if (atlas_labels) paths.insert(atlas_labels->lexically_normal());
    for (const auto& s : subjects) {
      if (s.id.empty()) throw Error(ErrorCode::Config, "subject id is empty");
      if (!ids.insert(s.id).second) throw Error(ErrorCode::Config, "duplicate subject id " + s.id);
      if (!valid_phase(s.phase)) throw Error(ErrorCode::Config, "unknown phase '" + s.phase + "' for " + s.id);
      if (!paths.insert(s.image.lexically_normal()).second)
        throw Error(ErrorCode::Config, "path listed twice: " + s.image.string());
      if (s.labels && !paths.insert(s.labels->lexically_normal()).second)
        throw Error(ErrorCode::Config, "path listed twice: " + s.labels->string());
    }
  }

  // Registration and QA settings recorded in atlas provenance.
  nlohmann::json parameters() const {
    nlohmann::json j;
    j["descriptor"] = {{"patch_radius", descriptor.patch_radius},
                       {"offset", descriptor.offset},
                       {"noise_rule", descriptor.noise_rule == NoiseRule::MeanOfPairSSDs ? "mean_of_pair_ssds" : "global_mean"},
                       {"norm", descriptor.norm == DistanceNorm::L1 ? "l1" : "l2"}};
    j["levels"] = {{"grid_spacing", levels.grid_spacing},
                   {"search_steps", levels.search_steps},
                   {"step_size", levels.step_size},
                   {"alpha", levels.alpha}};
    j["crop"] = {{"enabled", crop.enabled}, {"lo", crop.lo}, {"hi", crop.hi}, {"reference", crop.reference}};
    j["qa_threshold"] = qa_threshold;
    return j;
  }

  nlohmann::json to_json() const {
    nlohmann::json j = parameters();
    j["atlas"] = atlas.string();
    if (atlas_labels) j["atlas_labels"] = atlas_labels->string();
    j["subjects"] = nlohmann::json::array();
    for (const auto& s : subjects) {
      nlohmann::json e{{"id", s.id}, {"image", s.image.string()}, {"phase", s.phase}};
      if (s.labels) e["labels"] = s.labels->string();
      if (s.scores) e["scores"] = s.scores->string();
      j["subjects"].push_back(e);
    }
    j["output_dir"] = output_dir.string();
    j["workers"] = workers;
    return j;
  }
};

// "8x6x5,7x5x4,..." -> grid spacing x search steps x step size per level.
inline RegistrationLevels parse_levels(const std::string& spec, double alpha) {
  RegistrationLevels lv;
  lv.grid_spacing.clear();
  lv.search_steps.clear();
  lv.step_size.clear();
  lv.alpha = alpha;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    int g = 0, s = 0, st = 0;
    char x1 = 0, x2 = 0;
    std::istringstream is(item);
    if (!(is >> g >> x1 >> s >> x2 >> st) || x1 != 'x' || x2 != 'x' || !(is >> std::ws).eof())
      throw Error(ErrorCode::Config, "bad level '" + item + "', expected GxSxT");
    lv.grid_spacing.push_back(g);
    lv.search_steps.push_back(s);
    lv.step_size.push_back(st);
  }
  lv.validate();
  return lv;
}

namespace detail {

inline void check_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed, const char* where) {
  if (!j.is_object()) throw Error(ErrorCode::Config, std::string(where) + " must be an object");
  for (const auto& [k, v] : j.items())
    if (std::find(allowed.begin(), allowed.end(), k) == allowed.end())
      throw Error(ErrorCode::Config, "unknown key '" + k + "' in " + where);
}

inline fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

}  // namespace detail

// Relative paths are resolved against `base` (normally the config's directory).
inline PipelineConfig config_from_json(const nlohmann::json& j, const fs::path& base = {}) {
  using detail::resolve;
  PipelineConfig c;
  try {
    detail::check_keys(j, {"atlas", "atlas_labels", "subjects", "crop", "descriptor", "levels", "output_dir",
                           "qa_threshold", "workers"},
                       "config");
    c.atlas = resolve(base, j.at("atlas").get<std::string>());
    if (j.contains("atlas_labels")) c.atlas_labels = resolve(base, j["atlas_labels"].get<std::string>());
    for (const auto& s : j.at("subjects")) {
      detail::check_keys(s, {"id", "image", "labels", "scores", "phase"}, "subject");
      SubjectEntry e;
      e.image = resolve(base, s.at("image").get<std::string>());
      e.id = s.contains("id") ? s["id"].get<std::string>() : volume_stem(e.image);
      if (s.contains("labels")) e.labels = resolve(base, s["labels"].get<std::string>());
      if (s.contains("scores")) e.scores = resolve(base, s["scores"].get<std::string>());
      if (s.contains("phase")) e.phase = s["phase"].get<std::string>();
      c.subjects.push_back(std::move(e));
    }
    if (j.contains("crop")) {
      const auto& cr = j["crop"];
      detail::check_keys(cr, {"enabled", "lo", "hi", "reference"}, "crop");
      c.crop.enabled = cr.value("enabled", true);
      c.crop.lo = cr.value("lo", kDefaultCropLo);
      c.crop.hi = cr.value("hi", kDefaultCropHi);
      c.crop.reference = cr.value("reference", false);
    }
    if (j.contains("descriptor")) {
      const auto& d = j["descriptor"];
      detail::check_keys(d, {"patch_radius", "offset", "noise_rule", "norm"}, "descriptor");
      c.descriptor.patch_radius = d.value("patch_radius", c.descriptor.patch_radius);
      c.descriptor.offset = d.value("offset", c.descriptor.offset);
      const std::string rule = d.value("noise_rule", "mean_of_pair_ssds");
      if (rule == "mean_of_pair_ssds") c.descriptor.noise_rule = NoiseRule::MeanOfPairSSDs;
      else if (rule == "global_mean") c.descriptor.noise_rule = NoiseRule::GlobalMean;
      else throw Error(ErrorCode::Config, "unknown noise_rule '" + rule + "'");
      const std::string norm = d.value("norm", "l1");
      if (norm == "l1") c.descriptor.norm = DistanceNorm::L1;
      else if (norm == "l2") c.descriptor.norm = DistanceNorm::L2;
      else throw Error(ErrorCode::Config, "unknown norm '" + norm + "'");
    }
    if (j.contains("levels")) {
      const auto& l = j["levels"];
      detail::check_keys(l, {"grid_spacing", "search_steps", "step_size", "alpha"}, "levels");
      if (l.contains("grid_spacing")) c.levels.grid_spacing = l["grid_spacing"].get<std::vector<int>>();
      if (l.contains("search_steps")) c.levels.search_steps = l["search_steps"].get<std::vector<int>>();
      if (l.contains("step_size")) c.levels.step_size = l["step_size"].get<std::vector<int>>();
      c.levels.alpha = l.value("alpha", c.levels.alpha);
    }
    if (j.contains("output_dir")) c.output_dir = resolve(base, j["output_dir"].get<std::string>());
    c.qa_threshold = j.value("qa_threshold", kDefaultQaThreshold);
    c.workers = j.value("workers", 1);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Config, std::string("malformed config: ") + e.what());
  }
  c.validate();
  return c;
}

inline PipelineConfig load_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::Config, "cannot read config " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Config, "config is not valid JSON: " + std::string(e.what()));
  }
  return config_from_json(j, path.parent_path());
}

inline void save_config(const PipelineConfig& c, const fs::path& path) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorCode::IO, "cannot write " + path.string());
  os << c.to_json().dump(2) << "\n";
}

enum class QaFlag { Pass, Flagged };

inline QaFlag qa_flag(double similarity, double threshold) {
  return similarity < threshold ? QaFlag::Flagged : QaFlag::Pass;
}

struct SubjectResult {
  std::string id;
  std::string phase;
  std::optional<CropRecord> crop;
  fs::path affine_path;
  fs::path field_path;
  double similarity = 0.0;
  QaFlag qa = QaFlag::Pass;
  AffineTransform affine;
  DisplacementField field;  // on the atlas grid
};

struct SubjectFailure {
  std::string id;
  std::string message;
};

struct PipelineResult {
  std::map<std::string, AtlasBundle> atlases;  // by phase
  std::vector<SubjectResult> subjects;         // manifest order
  std::vector<SubjectFailure> failures;
  std::vector<std::string> notices;

  int exit_code() const { return failures.empty() ? 0 : 2; }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["subjects"] = nlohmann::json::array();
    for (const auto& s : subjects) {
      nlohmann::json e{{"id", s.id},
                       {"phase", s.phase},
                       {"affine", s.affine_path.string()},
                       {"field", s.field_path.string()},
                       {"similarity", s.similarity},
                       {"qa", s.qa == QaFlag::Pass ? "pass" : "flagged"}};
      e["crop"] = s.crop ? nlohmann::json{{"first_slice", s.crop->first_slice},
                                          {"last_slice", s.crop->last_slice},
                                          {"lo", s.crop->lo},
                                          {"hi", s.crop->hi}}
                         : nlohmann::json();
      j["subjects"].push_back(e);
    }
    j["failures"] = nlohmann::json::array();
    for (const auto& f : failures) j["failures"].push_back({{"id", f.id}, {"error", f.message}});
    j["notices"] = notices;
    j["atlases"] = nlohmann::json::object();
    for (const auto& [phase, b] : atlases) j["atlases"][phase] = b.provenance.to_json();
    return j;
  }
};

namespace detail {

struct SubjectOutput {
  SubjectResult result;
  ImageVolume warped;
  std::optional<LabelVolume> warped_labels;
};

struct LoadedSubject {
  ImageVolume image;
  std::optional<LabelVolume> labels;
  std::optional<CropRecord> crop;
};

inline SliceScoreTrack scores_for(const ImageVolume& image, const fs::path& path, const std::optional<fs::path>& scores) {
  const fs::path sidecar = scores ? *scores : sidecar_path_for(path);
  if (scores || fs::exists(sidecar)) return load_scores(sidecar, image);
  return estimate_scores(image);
}

inline LoadedSubject load_subject(const SubjectEntry& e, const CropSettings& crop) {
  LoadedSubject s;
  s.image = reorient_canonical(read_volume(e.image));
  if (e.labels) {
    s.labels = reorient_canonical(read_labels(*e.labels));
    if (!s.labels->geometry.same_as(s.image.geometry))
      throw Error(ErrorCode::Shape, "labels and image of " + e.id + " differ in geometry");
  }
  if (!crop.enabled) return s;
  auto cropped = crop_by_score(s.image, scores_for(s.image, e.image, e.scores), crop.lo, crop.hi);
  s.image = std::move(cropped.volume);
  s.crop = cropped.record;
  if (s.labels) s.labels = crop_slices(*s.labels, s.crop->first_slice, s.crop->last_slice);
  return s;
}

// The atlas as registration target: canonical, cropped when crop.reference is set.
inline LoadedSubject load_reference(const PipelineConfig& cfg) {
  LoadedSubject r;
  try {
    r.image = reorient_canonical(read_volume(cfg.atlas));
    if (cfg.crop.enabled && cfg.crop.reference) {
      auto cropped = crop_by_score(r.image, scores_for(r.image, cfg.atlas, std::nullopt), cfg.crop.lo, cfg.crop.hi);
      r.image = std::move(cropped.volume);
      r.crop = cropped.record;
    }
  } catch (const Error& e) {
    throw Error(ErrorCode::Config, "atlas unusable: " + std::string(e.what()));
  }
  return r;
}

// Affine start: translation that maps the subject's volume centre onto the atlas centre.
inline AffineTransform center_alignment(const GridGeometry& atlas, const GridGeometry& subject) {
  return AffineTransform::translation(atlas.center_world() - subject.center_world());
}

inline SubjectOutput register_subject(const SubjectEntry& e, const ImageVolume& atlas, const PipelineConfig& cfg) {
  LoadedSubject s = load_subject(e, cfg.crop);
  SubjectOutput out;
  SubjectResult& r = out.result;
  r.id = e.id;
  r.phase = e.phase;
  r.crop = s.crop;
  const GridGeometry& ag = atlas.geometry;
  r.affine = register_affine_traced(atlas, s.image, cfg.descriptor, cfg.levels, {},
                                    center_alignment(ag, s.image.geometry))
                 .transform;
  const ImageVolume moved = apply_affine(s.image, r.affine, ag, Interp::Trilinear);
  const std::vector<char> covered =
      detail::coverage(ag, s.image.geometry, r.affine, cfg.descriptor.offset + cfg.descriptor.patch_radius);
  r.field = register_deformable(atlas, moved, cfg.descriptor, cfg.levels, &covered);
  const DisplacementField total = compose_affine_field(r.affine, r.field, ag);
  out.warped = warp(s.image, total, Interp::Trilinear);
  if (s.labels) out.warped_labels = warp(*s.labels, total, Interp::Nearest);
  r.similarity = registration_similarity(atlas, out.warped, cfg.descriptor, &covered);
  r.qa = qa_flag(r.similarity, cfg.qa_threshold);
  return out;
}

inline void write_subject(SubjectOutput& o, const fs::path& root) {
  const fs::path dir = root / "subjects" / o.result.id;
  fs::create_directories(dir);
  o.result.affine_path = dir / "affine.txt";
  o.result.field_path = dir / "field.nii.gz";
  write_affine(o.result.affine, o.result.affine_path);
  write_field(o.result.field, o.result.field_path);
  write_volume(o.warped, dir / "warped.nii.gz");
  if (o.warped_labels) write_volume(*o.warped_labels, dir / "warped_labels.nii.gz");
}

inline void write_bundle(const AtlasBundle& b, const fs::path& dir) {
  fs::create_directories(dir);
  write_volume(b.mean, dir / "mean.nii.gz");
  if (b.variance) write_volume(*b.variance, dir / "variance.nii.gz");
  if (b.fused_labels) write_volume(*b.fused_labels, dir / "labels.nii.gz");
  std::ofstream os(dir / "provenance.json");
  if (!os) throw Error(ErrorCode::IO, "cannot write provenance in " + dir.string());
  os << b.provenance.to_json().dump(2) << "\n";
}

// Runs fn(i) for i in [0, n) on up to `workers` threads. Remaining workers
// are handed to the loops inside fn.
template <typename Fn>
void run_subjects(std::size_t n, int workers, Fn&& fn) {
  const int outer = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(std::max(1, workers)), n));
  const int inner = std::max(1, workers / std::max(1, outer));
  std::atomic<std::size_t> next{0};
  auto loop = [&] {
    parallel::ScopedWorkers scope(inner);
    for (std::size_t i = next++; i < n; i = next++) fn(i);
  };
  if (outer <= 1) {
    loop();
    return;
  }
  std::vector<std::thread> threads;
  for (int t = 0; t < outer; ++t) threads.emplace_back(loop);
  for (auto& th : threads) th.join();
}

}  // namespace detail

// Crop, affine and deformable registration of every subject to the atlas,
// then per-phase mean / variance / fused labels from the subjects passing QA.
// Failures are recorded per subject; an unreadable atlas is fatal.
inline PipelineResult run_pipeline(const PipelineConfig& cfg) {
  cfg.validate();
  const ImageVolume atlas = detail::load_reference(cfg).image;

  const std::size_t n = cfg.subjects.size();
  std::vector<std::optional<detail::SubjectOutput>> outputs(n);
  std::vector<std::string> errors(n);
  detail::run_subjects(n, cfg.workers, [&](std::size_t i) {
    try {
      detail::SubjectOutput o = detail::register_subject(cfg.subjects[i], atlas, cfg);
      if (!cfg.output_dir.empty()) detail::write_subject(o, cfg.output_dir);
      outputs[i] = std::move(o);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });

  PipelineResult res;
  for (std::size_t i = 0; i < n; ++i) {
    if (!outputs[i]) {
      res.failures.push_back({cfg.subjects[i].id, errors[i]});
      continue;
    }
    res.subjects.push_back(outputs[i]->result);
    if (outputs[i]->result.qa == QaFlag::Flagged)
      res.notices.push_back("subject " + cfg.subjects[i].id + " flagged by QA; excluded from the atlas");
  }

  std::vector<std::string> phases;
  for (const auto& s : cfg.subjects)
    if (std::find(phases.begin(), phases.end(), s.phase) == phases.end()) phases.push_back(s.phase);
  for (const auto& phase : phases) {
    std::vector<ImageVolume> images;
    std::vector<LabelVolume> labels;
    AtlasProvenance prov;
    prov.phase = phase;
    if (cfg.crop.enabled) prov.crop_range = std::make_pair(cfg.crop.lo, cfg.crop.hi);
    prov.parameters = cfg.parameters();
    bool all_labelled = true;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& o = outputs[i];
      if (!o || o->result.phase != phase || o->result.qa == QaFlag::Flagged) continue;
      images.push_back(o->warped);
      prov.subject_ids.push_back(o->result.id);
      if (o->warped_labels) labels.push_back(*o->warped_labels);
      else all_labelled = false;
    }
    if (images.empty()) {
      res.notices.push_back("phase " + phase + ": no subject passed; atlas not built");
      continue;
    }
    if (!all_labelled) labels.clear();
    AtlasBundle b = build_atlas(images, labels, std::move(prov));
    if (!b.variance) res.notices.push_back("phase " + phase + ": variance skipped (insufficient cohort)");
    if (!cfg.output_dir.empty()) detail::write_bundle(b, cfg.output_dir / "atlas" / phase);
    res.atlases.emplace(phase, std::move(b));
  }

  if (!cfg.output_dir.empty()) {
    fs::create_directories(cfg.output_dir);
    std::ofstream os(cfg.output_dir / "results.json");
    if (!os) throw Error(ErrorCode::IO, "cannot write results.json");
    os << res.to_json().dump(2) << "\n";
  }
  return res;
}

namespace detail {

inline std::vector<std::uint16_t> organ_ids(const LabelVolume& labels) {
  std::set<std::uint16_t> ids(labels.data.begin(), labels.data.end());
  ids.erase(0);
  return {ids.begin(), ids.end()};
}

// Dice and Hausdorff per atlas organ between transferred and true labels.
inline std::vector<EvalRecord> score_subject(const std::string& subject, const std::string& method,
                                             const LabelVolume& predicted, const LabelVolume& truth,
                                             const std::vector<std::uint16_t>& organs,
                                             const std::map<std::uint16_t, std::string>& names) {
  std::vector<EvalRecord> out;
  for (const auto id : organs) {
    EvalRecord r;
    r.subject = subject;
    r.method = method;
    r.organ = id;
    const auto it = names.find(id);
    r.organ_name = it != names.end() ? it->second : "label" + std::to_string(id);
    const Mask p = organ_mask(predicted, id), g = organ_mask(truth, id);
    r.dice = dice(p, g);
    try {
      r.hd_mm = hausdorff(p, g, truth.dims(), truth.geometry.spacing);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::UndefinedDistance) throw;
    }
    out.push_back(std::move(r));
  }
  return out;
}

// Atlas labels pulled back onto the subject's full (uncropped) grid.
inline std::vector<EvalRecord> evaluate_subject(const SubjectEntry& e, const LabelVolume& atlas_labels,
                                                const AffineTransform& a, const DisplacementField& field,
                                                const std::string& method) {
  if (!e.labels) throw Error(ErrorCode::Config, "subject " + e.id + " has no labels");
  const LabelVolume truth = reorient_canonical(read_labels(*e.labels));
  const LabelVolume predicted = transfer_labels_inverse(atlas_labels, a, field, truth.geometry);
  return score_subject(e.id, method, predicted, truth, organ_ids(atlas_labels), atlas_labels.label_names);
}

inline LabelVolume load_atlas_labels(const PipelineConfig& cfg) {
  if (!cfg.atlas_labels) throw Error(ErrorCode::Config, "atlas labels are required");
  LabelVolume labels;
  try {
    labels = reorient_canonical(read_labels(*cfg.atlas_labels));
  } catch (const Error& e) {
    throw Error(ErrorCode::Config, "atlas labels unreadable: " + std::string(e.what()));
  }
  if (cfg.crop.enabled && cfg.crop.reference) {
    const auto ref = load_reference(cfg);
    if (labels.dims()[2] <= ref.crop->last_slice) throw Error(ErrorCode::Config, "atlas labels and atlas differ in geometry");
    labels = crop_slices(labels, ref.crop->first_slice, ref.crop->last_slice);
    if (!labels.geometry.same_as(ref.image.geometry))
      throw Error(ErrorCode::Config, "atlas labels and atlas differ in geometry");
  }
  return labels;
}

}  // namespace detail

// Inverse label transfer for subjects whose transforms already sit under
// output_dir/subjects/<id>/.
inline EvalReport run_eval(const PipelineConfig& cfg, const std::string& method = "atlas") {
  cfg.validate();
  const LabelVolume atlas_labels = detail::load_atlas_labels(cfg);
  const std::size_t n = cfg.subjects.size();
  std::vector<std::vector<EvalRecord>> recs(n);
  std::vector<std::string> errors(n);
  detail::run_subjects(n, cfg.workers, [&](std::size_t i) {
    const auto& e = cfg.subjects[i];
    try {
      const fs::path dir = cfg.output_dir / "subjects" / e.id;
      const AffineTransform a = read_affine(dir / "affine.txt");
      const DisplacementField f = read_field(dir / "field.nii.gz");
      recs[i] = detail::evaluate_subject(e, atlas_labels, a, f, method);
    } catch (const std::exception& ex) {
      errors[i] = ex.what();
    }
  });
  std::vector<EvalRecord> all;
  std::vector<std::string> failures;
  for (std::size_t i = 0; i < n; ++i) {
    if (!errors[i].empty()) failures.push_back(cfg.subjects[i].id + ": " + errors[i]);
    all.insert(all.end(), recs[i].begin(), recs[i].end());
  }
  EvalReport rep = build_report(std::move(all));
  rep.failures = std::move(failures);
  return rep;
}

struct CropRange {
  std::string name;                          // "full" or "[lo,hi]"
  std::optional<std::pair<double, double>> range;  // empty = no cropping
};

inline CropRange crop_range(double lo, double hi) {
  std::ostringstream s;
  s << "[" << lo << "," << hi << "]";
  return {s.str(), std::make_pair(lo, hi)};
}

inline CropRange full_fov() { return {"full", std::nullopt}; }

struct AblationResult {
  std::vector<std::string> ranges;
  std::vector<std::string> organs;
  std::vector<std::vector<double>> mean_dice;  // range x organ
  EvalReport report;                           // method = range name

  double range_mean(std::size_t r) const {
    double s = 0.0;
    for (double d : mean_dice[r]) s += d;
    return mean_dice[r].empty() ? 0.0 : s / static_cast<double>(mean_dice[r].size());
  }

  std::string to_table() const {
    std::ostringstream out;
    out << std::left << std::setw(14) << "range";
    for (const auto& o : organs) out << std::setw(12) << o;
    out << "mean\n" << std::fixed << std::setprecision(4);
    for (std::size_t r = 0; r < ranges.size(); ++r) {
      out << std::setw(14) << ranges[r];
      for (double d : mean_dice[r]) out << std::setw(12) << d;
      out << range_mean(r) << "\n";
    }
    return out.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["ranges"] = ranges;
    j["organs"] = organs;
    j["mean_dice"] = mean_dice;
    j["report"] = report.to_json();
    return j;
  }
};

// Full pipeline and inverse label transfer once per crop range.
inline AblationResult run_ablation(const PipelineConfig& base, const std::vector<CropRange>& ranges) {
  if (ranges.empty()) throw Error(ErrorCode::Config, "no crop ranges given");
  base.validate();
  for (const auto& s : base.subjects)
    if (!s.labels) throw Error(ErrorCode::Config, "subject " + s.id + " has no labels");
  const LabelVolume atlas_labels = detail::load_atlas_labels(base);
  const auto organs = detail::organ_ids(atlas_labels);

  AblationResult out;
  std::vector<EvalRecord> all;
  for (const auto& r : ranges) {
    PipelineConfig cfg = base;
    cfg.crop.enabled = r.range.has_value();
    if (r.range) std::tie(cfg.crop.lo, cfg.crop.hi) = *r.range;
    const LabelVolume range_labels = cfg.crop.reference ? detail::load_atlas_labels(cfg) : atlas_labels;
    if (!base.output_dir.empty()) {
      std::string dir = r.name;
      std::replace_if(dir.begin(), dir.end(), [](char c) { return c == '[' || c == ']' || c == ','; }, '_');
      cfg.output_dir = base.output_dir / "ablation" / dir;
    }
    const PipelineResult pr = run_pipeline(cfg);
    std::vector<std::vector<EvalRecord>> recs(pr.subjects.size());
    std::vector<char> failed(pr.subjects.size(), 0);
    detail::run_subjects(pr.subjects.size(), cfg.workers, [&](std::size_t i) {
      const auto& sr = pr.subjects[i];
      const auto it = std::find_if(cfg.subjects.begin(), cfg.subjects.end(),
                                   [&](const SubjectEntry& e) { return e.id == sr.id; });
      try {
        recs[i] = detail::evaluate_subject(*it, range_labels, sr.affine, sr.field, r.name);
      } catch (const std::exception&) {
        failed[i] = 1;
      }
    });
    // Failed subjects score zero on every organ.
    std::vector<std::string> zero_ids;
    for (const auto& f : pr.failures) zero_ids.push_back(f.id);
    for (std::size_t i = 0; i < failed.size(); ++i)
      if (failed[i]) zero_ids.push_back(pr.subjects[i].id);
    for (const auto& sid : zero_ids) {
      std::vector<EvalRecord> v;
      for (const auto id : organs) {
        EvalRecord rec;
        rec.subject = sid;
        rec.method = r.name;
        rec.organ = id;
        const auto nm = atlas_labels.label_names.find(id);
        rec.organ_name = nm != atlas_labels.label_names.end() ? nm->second : "label" + std::to_string(id);
        v.push_back(std::move(rec));
      }
      recs.push_back(std::move(v));
    }
    out.ranges.push_back(r.name);
    std::vector<double> row;
    for (const auto id : organs) {
      double s = 0.0;
      std::size_t cnt = 0;
      for (const auto& v : recs)
        for (const auto& rec : v)
          if (rec.organ == id) {
            s += rec.dice;
            ++cnt;
          }
      row.push_back(cnt ? s / static_cast<double>(cnt) : 0.0);
    }
    out.mean_dice.push_back(std::move(row));
    for (auto& v : recs) all.insert(all.end(), v.begin(), v.end());
  }
  for (const auto id : organs) {
    const auto nm = atlas_labels.label_names.find(id);
    out.organs.push_back(nm != atlas_labels.label_names.end() ? nm->second : "label" + std::to_string(id));
  }
  out.report = build_report(std::move(all));
  return out;
}

}  // namespace ctatlas
