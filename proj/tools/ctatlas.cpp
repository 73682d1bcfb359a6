#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "ctatlas/pipeline.hpp"
#include "ctatlas/synthetic.hpp"

namespace {

using namespace ctatlas;
namespace fs = std::filesystem;

constexpr int kExitOk = 0;
constexpr int kExitFatal = 1;

// Flags shared by the batch verbs; each overrides the matching config field.
struct Overrides {
  std::string config;
  std::string atlas;
  std::string atlas_labels;
  std::string out;
  std::optional<double> lo, hi;
  bool no_crop = false;
  bool crop_reference = false;
  std::string levels;
  std::optional<double> alpha;
  std::optional<int> workers;
  std::optional<double> qa_threshold;
  std::vector<std::string> subjects;
};

void add_batch_flags(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config, "Pipeline config (JSON)");
  app->add_option("--atlas", o.atlas, "Atlas volume");
  app->add_option("--atlas-labels", o.atlas_labels, "Atlas label volume");
  app->add_option("--out", o.out, "Output directory");
  app->add_option("--lo", o.lo, "Lower crop score");
  app->add_option("--hi", o.hi, "Upper crop score");
  app->add_flag("--no-crop", o.no_crop, "Register the full field of view");
  app->add_flag("--crop-reference", o.crop_reference, "Crop the atlas by its own scores as well");
  app->add_option("--levels", o.levels, "Schedule GxSxT per level, comma separated");
  app->add_option("--alpha", o.alpha, "Regularisation weight");
  app->add_option("--workers", o.workers, "Worker threads");
  app->add_option("--qa-threshold", o.qa_threshold, "Similarity floor for QA");
  app->add_option("subjects", o.subjects, "Subject volumes (instead of a config manifest)");
}

PipelineConfig make_config(const Overrides& o) {
  PipelineConfig c;
  if (!o.config.empty()) {
    c = load_config(o.config);
  }
  if (!o.atlas.empty()) c.atlas = o.atlas;
  if (!o.atlas_labels.empty()) c.atlas_labels = fs::path(o.atlas_labels);
  if (!o.out.empty()) c.output_dir = o.out;
  if (o.lo) c.crop.lo = *o.lo;
  if (o.hi) c.crop.hi = *o.hi;
  if (o.no_crop) c.crop.enabled = false;
  if (o.crop_reference) c.crop.reference = true;
  if (!o.levels.empty()) c.levels = parse_levels(o.levels, o.alpha.value_or(c.levels.alpha));
  if (o.alpha) c.levels.alpha = *o.alpha;
  if (o.workers) c.workers = *o.workers;
  if (o.qa_threshold) c.qa_threshold = *o.qa_threshold;
  if (!o.subjects.empty()) {
    c.subjects.clear();
    for (const auto& s : o.subjects) {
      SubjectEntry e;
      e.image = s;
      e.id = volume_stem(e.image);
      const fs::path labels = e.image.parent_path() / (e.id + "_labels.nii.gz");
      if (fs::exists(labels)) e.labels = labels;
      c.subjects.push_back(std::move(e));
    }
  }
  c.validate();
  return c;
}

RegistrationLevels make_levels(const std::string& spec, std::optional<double> alpha) {
  RegistrationLevels lv;
  if (!spec.empty()) lv = parse_levels(spec, alpha.value_or(lv.alpha));
  if (alpha) lv.alpha = *alpha;
  lv.validate();
  return lv;
}

void write_json(const nlohmann::json& j, const fs::path& path) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorCode::IO, "cannot write " + path.string());
  os << j.dump(2) << "\n";
}

CropRange parse_range(const std::string& s) {
  if (s == "full") return full_fov();
  const auto comma = s.find(',');
  if (comma == std::string::npos) throw Error(ErrorCode::Config, "range '" + s + "' is not 'full' or 'lo,hi'");
  try {
    return crop_range(std::stod(s.substr(0, comma)), std::stod(s.substr(comma + 1)));
  } catch (const std::logic_error&) {
    throw Error(ErrorCode::Config, "range '" + s + "' is not numeric");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Abdominal CT atlas construction: crop, register, aggregate, evaluate"};
  app.require_subcommand(1);
  int workers = 1;
  app.add_option("-j,--threads", workers, "Worker threads for single-volume verbs");

  // crop
  auto* crop = app.add_subcommand("crop", "Crop a volume to a body-part score range");
  std::string crop_in, crop_out, crop_scores = "auto";
  double crop_lo = kDefaultCropLo, crop_hi = kDefaultCropHi;
  crop->add_option("input", crop_in, "Input volume")->required();
  crop->add_option("-o,--output", crop_out, "Cropped volume")->required();
  crop->add_option("--lo", crop_lo, "Lower score");
  crop->add_option("--hi", crop_hi, "Upper score");
  crop->add_option("--scores", crop_scores, "Score sidecar, or 'auto' for <stem>.bpr.json / estimate");

  // affine
  auto* aff = app.add_subcommand("affine", "Affine registration of a moving volume to the atlas");
  std::string aff_atlas, aff_moving, aff_out, aff_levels;
  std::optional<double> aff_alpha;
  bool aff_identity = false;
  aff->add_option("--atlas", aff_atlas, "Fixed (atlas) volume")->required();
  aff->add_option("moving", aff_moving, "Moving volume")->required();
  aff->add_option("-o,--output", aff_out, "Affine text file")->required();
  aff->add_option("--levels", aff_levels, "Schedule GxSxT per level");
  aff->add_option("--alpha", aff_alpha, "Unused by the affine stage; accepted for symmetry");
  aff->add_flag("--identity-init", aff_identity, "Start from identity instead of centre alignment");

  // deform
  auto* def = app.add_subcommand("deform", "Deformable registration after an affine");
  std::string def_atlas, def_moving, def_affine, def_out, def_levels;
  std::optional<double> def_alpha;
  def->add_option("--atlas", def_atlas, "Fixed (atlas) volume")->required();
  def->add_option("moving", def_moving, "Moving volume")->required();
  def->add_option("--affine", def_affine, "Affine from the affine verb")->required();
  def->add_option("-o,--output", def_out, "Displacement field (NIfTI)")->required();
  def->add_option("--levels", def_levels, "Schedule GxSxT per level");
  def->add_option("--alpha", def_alpha, "Regularisation weight");

  // warp
  auto* wrp = app.add_subcommand("warp", "Resample a volume through an affine and/or field");
  std::string wrp_in, wrp_out, wrp_affine, wrp_field, wrp_ref;
  bool wrp_labels = false;
  wrp->add_option("input", wrp_in, "Volume to warp")->required();
  wrp->add_option("-o,--output", wrp_out, "Warped volume")->required();
  wrp->add_option("--affine", wrp_affine, "Affine (moving to atlas)");
  wrp->add_option("--field", wrp_field, "Field on the atlas grid");
  wrp->add_option("--reference", wrp_ref, "Target grid when no field is given");
  wrp->add_flag("--labels", wrp_labels, "Nearest-neighbour label resampling");

  // invert
  auto* inv = app.add_subcommand("invert", "Fixed-point inverse of a displacement field");
  std::string inv_in, inv_out;
  InverseOptions inv_opt;
  inv->add_option("input", inv_in, "Field")->required();
  inv->add_option("-o,--output", inv_out, "Inverse field")->required();
  inv->add_option("--iterations", inv_opt.max_iterations, "Maximum iterations");
  inv->add_option("--tolerance", inv_opt.tolerance, "Mean update tolerance (voxels)");

  // transfer-labels
  auto* tl = app.add_subcommand("transfer-labels", "Map atlas labels onto a subject grid");
  std::string tl_labels, tl_affine, tl_field, tl_subject, tl_out;
  tl->add_option("atlas_labels", tl_labels, "Atlas label volume")->required();
  tl->add_option("--affine", tl_affine, "Affine (subject to atlas)")->required();
  tl->add_option("--field", tl_field, "Field on the atlas grid")->required();
  tl->add_option("--subject", tl_subject, "Subject volume defining the output grid")->required();
  tl->add_option("-o,--output", tl_out, "Subject-space labels")->required();

  // atlas-mean / atlas-var / fuse-labels
  std::vector<std::string> mean_in, var_in, fuse_in;
  std::string mean_out, var_out, fuse_out;
  auto* am = app.add_subcommand("atlas-mean", "Voxel-wise mean of registered volumes");
  am->add_option("inputs", mean_in, "Volumes on one grid")->required();
  am->add_option("-o,--output", mean_out, "Mean map")->required();
  auto* av = app.add_subcommand("atlas-var", "Voxel-wise sample variance of registered volumes");
  av->add_option("inputs", var_in, "Volumes on one grid (at least two)")->required();
  av->add_option("-o,--output", var_out, "Variance map")->required();
  auto* fl = app.add_subcommand("fuse-labels", "Majority-vote label fusion");
  fl->add_option("inputs", fuse_in, "Label volumes on one grid")->required();
  fl->add_option("-o,--output", fuse_out, "Fused labels")->required();

  // batch verbs
  Overrides pipe_o, eval_o, abl_o;
  auto* pipe = app.add_subcommand("pipeline", "Crop, register and build per-phase atlases");
  add_batch_flags(pipe, pipe_o);
  auto* ev = app.add_subcommand("eval", "Inverse label transfer scores for transforms under --out");
  add_batch_flags(ev, eval_o);
  std::string eval_method = "atlas";
  ev->add_option("--method", eval_method, "Method name in the report");
  auto* abl = app.add_subcommand("ablate", "Pipeline and evaluation per crop range");
  add_batch_flags(abl, abl_o);
  std::vector<std::string> abl_ranges;
  abl->add_option("--range", abl_ranges, "'full' or 'lo,hi'; repeatable (default: full and the crop range)");

  // phantom
  auto* ph = app.add_subcommand("phantom", "Write a synthetic cohort with labels, scores and config");
  std::string ph_out;
  synthetic::CohortOptions ph_opt;
  ph->add_option("--out", ph_out, "Output directory")->required();
  ph->add_option("--subjects", ph_opt.subjects, "Number of subjects");
  ph->add_option("--size", ph_opt.size, "Atlas edge length (voxels)");
  ph->add_option("--seed", ph_opt.seed, "Random seed");
  ph->add_option("--distractor-slices", ph_opt.distractor_slices, "Extra slices above and below, at most");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitFatal;
  }

  try {
    parallel::set_workers(workers);

    if (*crop) {
      const ImageVolume v = reorient_canonical(read_volume(crop_in));
      const SliceScoreTrack track = crop_scores == "auto" ? detail::scores_for(v, crop_in, std::nullopt)
                                                          : load_scores(crop_scores, v);
      const auto c = crop_by_score(v, track, crop_lo, crop_hi);
      write_volume(c.volume, crop_out);
      save_scores(crop_track(track, c.record), sidecar_path_for(crop_out));
      std::cout << nlohmann::json{{"first_slice", c.record.first_slice},
                                  {"last_slice", c.record.last_slice},
                                  {"lo", c.record.lo},
                                  {"hi", c.record.hi}}
                       .dump()
                << "\n";
      return kExitOk;
    }
    if (*aff) {
      const ImageVolume fixed = reorient_canonical(read_volume(aff_atlas));
      const ImageVolume moving = reorient_canonical(read_volume(aff_moving));
      const AffineTransform init = aff_identity ? AffineTransform::identity()
                                                : detail::center_alignment(fixed.geometry, moving.geometry);
      const auto r = register_affine_traced(fixed, moving, DescriptorParams{}, make_levels(aff_levels, aff_alpha), {},
                                            init);
      write_affine(r.transform, aff_out);
      std::printf("objective %.6f -> %.6f\n", r.initial_objective,
                  r.trace.empty() ? r.initial_objective : r.trace.back().objective);
      return kExitOk;
    }
    if (*def) {
      const ImageVolume fixed = reorient_canonical(read_volume(def_atlas));
      const ImageVolume moving = reorient_canonical(read_volume(def_moving));
      const AffineTransform a = read_affine(def_affine);
      const DescriptorParams params;
      const ImageVolume moved = apply_affine(moving, a, fixed.geometry, Interp::Trilinear);
      const std::vector<char> covered =
          detail::coverage(fixed.geometry, moving.geometry, a, params.offset + params.patch_radius);
      const auto r =
          register_deformable_traced(fixed, moved, params, make_levels(def_levels, def_alpha), {}, &covered);
      write_field(r.field, def_out);
      std::printf("objective %.6f -> %.6f\n", r.initial_objective,
                  r.trace.empty() ? r.initial_objective : r.trace.back().objective);
      return kExitOk;
    }
    if (*wrp) {
      std::optional<DisplacementField> field;
      if (!wrp_field.empty()) field = read_field(wrp_field);
      const AffineTransform a = wrp_affine.empty() ? AffineTransform::identity() : read_affine(wrp_affine);
      std::optional<GridGeometry> target;
      if (field) target = field->geometry;
      else if (!wrp_ref.empty()) target = reorient_canonical(read_volume(wrp_ref)).geometry;
      else throw Error(ErrorCode::Config, "warp needs --field or --reference");
      const DisplacementField total = compose_affine_field(a, field ? *field : DisplacementField(*target), *target);
      if (wrp_labels)
        write_volume(warp(reorient_canonical(read_labels(wrp_in)), total, Interp::Nearest), wrp_out);
      else
        write_volume(warp(reorient_canonical(read_volume(wrp_in)), total, Interp::Trilinear), wrp_out);
      return kExitOk;
    }
    if (*inv) {
      const FieldInverse r = invert_field(read_field(inv_in), inv_opt);
      write_field(r.field, inv_out);
      std::printf("residual mean %.6f max %.6f iterations %d\n", r.residual_mean, r.residual_max, r.iterations);
      return kExitOk;
    }
    if (*tl) {
      const LabelVolume labels = reorient_canonical(read_labels(tl_labels));
      const GridGeometry subject = reorient_canonical(read_volume(tl_subject)).geometry;
      write_volume(transfer_labels_inverse(labels, read_affine(tl_affine), read_field(tl_field), subject), tl_out);
      return kExitOk;
    }
    if (*am || *av) {
      const auto& inputs = *am ? mean_in : var_in;
      std::vector<ImageVolume> vols;
      for (const auto& p : inputs) vols.push_back(reorient_canonical(read_volume(p)));
      const ImageVolume mean = mean_map(vols);
      if (*am) write_volume(mean, mean_out);
      else write_volume(variance_map(vols, mean), var_out);
      return kExitOk;
    }
    if (*fl) {
      std::vector<LabelVolume> vols;
      for (const auto& p : fuse_in) vols.push_back(reorient_canonical(read_labels(p)));
      write_volume(fuse_labels_majority(vols), fuse_out);
      return kExitOk;
    }
    if (*pipe) {
      const PipelineConfig cfg = make_config(pipe_o);
      const PipelineResult r = run_pipeline(cfg);
      for (const auto& s : r.subjects)
        std::printf("%-16s %-14s similarity %.4f %s\n", s.id.c_str(), s.phase.c_str(), s.similarity,
                    s.qa == QaFlag::Pass ? "pass" : "flagged");
      for (const auto& f : r.failures) std::fprintf(stderr, "failed %s: %s\n", f.id.c_str(), f.message.c_str());
      for (const auto& n : r.notices) std::fprintf(stderr, "note: %s\n", n.c_str());
      return r.exit_code();
    }
    if (*ev) {
      const PipelineConfig cfg = make_config(eval_o);
      const EvalReport rep = run_eval(cfg, eval_method);
      std::cout << rep.to_table();
      if (!cfg.output_dir.empty()) write_json(rep.to_json(), cfg.output_dir / "eval.json");
      for (const auto& f : rep.failures) std::fprintf(stderr, "failed %s\n", f.c_str());
      return rep.failures.empty() ? kExitOk : 2;
    }
    if (*abl) {
      const PipelineConfig cfg = make_config(abl_o);
      std::vector<CropRange> ranges;
      for (const auto& s : abl_ranges) ranges.push_back(parse_range(s));
      if (abl_ranges.empty()) ranges = {full_fov(), crop_range(cfg.crop.lo, cfg.crop.hi)};
      const AblationResult r = run_ablation(cfg, ranges);
      std::cout << r.to_table();
      if (!cfg.output_dir.empty()) {
        fs::create_directories(cfg.output_dir);
        write_json(r.to_json(), cfg.output_dir / "ablation.json");
      }
      return kExitOk;
    }
    if (*ph) {
      const auto c = synthetic::write_cohort(ph_out, ph_opt);
      std::printf("wrote %zu subjects and %s\n", c.config.subjects.size(), (fs::path(ph_out) / "config.json").c_str());
      return kExitOk;
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitFatal;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitFatal;
  }
  return kExitFatal;
}
