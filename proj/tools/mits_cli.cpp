// Command-line front end: synthetic data, training, tracking, evaluation,
// ablations and visualisation.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "mits/mits.hpp"

namespace fs = std::filesystem;
using namespace mits;

namespace {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
};

Config load(const Globals& g) {
  Config cfg = g.config_path.empty() ? Config{} : load_config(g.config_path);
  if (g.seed) {
    cfg.train.seed = *g.seed;
    cfg.synth.seed = *g.seed;
  }
  validate(cfg);
  return cfg;
}

InitFormat parse_init(const std::string& s) {
  if (s == "mask") return InitFormat::Mask;
  if (s == "box") return InitFormat::Box;
  throw Error(Errc::InitFormatMismatch, "--init must be mask or box");
}

void write_json(const fs::path& path, const nlohmann::ordered_json& j) {
  std::ofstream f(path);
  if (!f) throw Error(Errc::IoError, "cannot write " + path.string());
  f << j.dump(2) << "\n";
}

// Sequence folders directly under `root`, or `root` itself when it is one.
std::vector<fs::path> sequence_dirs(const fs::path& root) {
  if (fs::is_directory(root / "frames") || fs::exists(root / "boxes.txt")) return {root};
  std::vector<fs::path> out;
  if (fs::is_directory(root))
    for (const auto& e : fs::directory_iterator(root))
      if (e.is_directory() && (fs::is_directory(e.path() / "frames") || fs::exists(e.path() / "boxes.txt")))
        out.push_back(e.path());
  std::sort(out.begin(), out.end());
  if (out.empty()) throw Error(Errc::IoError, "no sequence folders under " + root.string());
  return out;
}

void write_results(const fs::path& out, const std::vector<FrameResult>& res, InitFormat fmt) {
  fs::create_directories(out / "masks");
  std::vector<std::vector<MaybeBox>> boxes, mask_boxes;
  nlohmann::ordered_json frames = nlohmann::ordered_json::array();
  for (std::size_t t = 0; t < res.size(); ++t) {
    write_png_indexed((out / "masks" / frame_filename(int(t))).string(), res[t].labels.grid);
    boxes.push_back(res[t].boxes);
    mask_boxes.push_back(res[t].mask_boxes);
    nlohmann::ordered_json f;
    f["frame"] = t;
    f["present"] = res[t].present;
    f["consistency"] = res[t].consistency;
    f["mask_mass"] = res[t].mask_mass;
    frames.push_back(f);
  }
  write_box_file((out / "boxes.txt").string(), boxes);
  write_box_file((out / "mask_boxes.txt").string(), mask_boxes);
  nlohmann::ordered_json j;
  j["init"] = fmt == InitFormat::Box ? "box" : "mask";
  j["objects"] = res.empty() ? 0 : res.front().labels.num_objects;
  j["frames"] = frames;
  write_json(out / "result.json", j);
}

std::vector<FrameResult> track_folder(TrackerModel model, const Config& cfg, const SequenceSample& raw,
                                      InitFormat fmt) {
  const auto s = relabel_targets(raw, 0);
  return track_sequence(model, cfg.memory, s.frames, reference_from(s.labels.front(), fmt));
}

// Predictions on disk as frame results scored against relabelled ground truth.
SequenceReport evaluate_folder(const fs::path& pred, const fs::path& gt_dir, const std::string& task) {
  const auto gt = relabel_targets(load_mask_folder(gt_dir), 0);
  const int n = gt.num_objects();
  std::vector<FrameResult> res(gt.length());
  if (task == "vot") {
    auto boxes = load_box_file((pred / "boxes.txt").string());
    if (int(boxes.size()) != gt.length()) throw Error(Errc::LengthMismatch, "boxes.txt and ground truth lengths differ");
    for (int t = 0; t < gt.length(); ++t) {
      boxes[t].resize(n);
      res[t].boxes = boxes[t];
    }
  } else {
    for (int t = 0; t < gt.length(); ++t) {
      const auto path = pred / "masks" / frame_filename(t);
      if (!fs::exists(path)) throw Error(Errc::MissingFrame, "no predicted mask " + path.string(), long(t));
      LabelMap lm;
      lm.grid = read_png_indexed(path.string()).indices;
      lm.num_objects = n;
      lm.validate();
      res[t].labels = std::move(lm);
    }
  }
  for (auto& r : res) {
    if (r.boxes.empty()) r.boxes.resize(n);
    r.mask_boxes = r.labels.grid.size() ? label_boxes(r.labels) : std::vector<MaybeBox>(n);
    r.consistency = branch_consistency(r.boxes, r.mask_boxes);
  }
  auto rep = report_sequence(gt, res, task);
  rep.name = gt_dir.filename().string();
  return rep;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-object box/mask tracker and segmenter"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Seed for training and synthetic data");

  auto* synth = app.add_subcommand("synth", "Write synthetic sequences as mask folders");
  std::string synth_out;
  int synth_count = 8;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--count", synth_count, "Number of sequences")->check(CLI::PositiveNumber);

  auto* train = app.add_subcommand("train", "Train a model");
  std::string train_out, train_resume;
  std::optional<int> train_steps;
  train->add_option("--out", train_out, "Checkpoint path")->required();
  train->add_option("--steps", train_steps, "Override train.steps");
  train->add_option("--resume", train_resume, "Continue from this checkpoint")->check(CLI::ExistingFile);

  auto* track = app.add_subcommand("track", "Track one sequence folder");
  std::string track_ckpt, track_seq, track_out, track_init = "mask";
  track->add_option("--checkpoint", track_ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
  track->add_option("--sequence", track_seq, "Sequence folder (frames/, masks/)")->required();
  track->add_option("--out", track_out, "Output folder")->required();
  track->add_option("--init", track_init, "Reference format")->check(CLI::IsMember({"mask", "box"}));

  auto* eval = app.add_subcommand("eval", "Score results against ground truth");
  std::string eval_task = "vot", eval_pred, eval_gt, eval_report;
  eval->add_option("--task", eval_task, "vot or vos")->check(CLI::IsMember({"vot", "vos"}));
  eval->add_option("--pred", eval_pred, "Result folder (or parent of result folders)")->required();
  eval->add_option("--gt", eval_gt, "Ground-truth sequence folder (or parent)")->required();
  eval->add_option("--report", eval_report, "Report path (default <pred>/report_<task>.json)");

  auto* ablate = app.add_subcommand("ablate", "Train a variant and score it on held-out synthetic sequences");
  AblationFlags flags;
  std::string head_name, ablate_report, ablate_ckpt;
  int ablate_heldout = 16;
  std::optional<int> ablate_steps;
  ablate->add_flag("--no-bidr-ca", flags.no_dual_cross_attention, "Only the image path is cross-attended");
  ablate->add_flag("--no-recon", flags.no_mask_reconstruction, "Drop the auxiliary mask reconstruction");
  ablate->add_option("--head", head_name, "Box head")->check(CLI::IsMember({"corner", "pinpoint", "pinpoint-implicit"}));
  ablate->add_option("--steps", ablate_steps, "Override train.steps");
  ablate->add_option("--held-out", ablate_heldout, "Held-out sequence count")->check(CLI::PositiveNumber);
  ablate->add_option("--report", ablate_report, "Report path")->required();
  ablate->add_option("--checkpoint", ablate_ckpt, "Also save the trained model here");

  auto* viz = app.add_subcommand("viz", "Overlay masks, boxes and pinpoint maps");
  std::string viz_ckpt, viz_seq, viz_out, viz_init = "mask";
  viz->add_option("--checkpoint", viz_ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
  viz->add_option("--sequence", viz_seq, "Sequence folder")->required();
  viz->add_option("--out", viz_out, "Output folder")->required();
  viz->add_option("--init", viz_init, "Reference format")->check(CLI::IsMember({"mask", "box"}));

  CLI11_PARSE(app, argc, argv);

  try {
    torch::set_num_threads(1);
    if (*synth) {
      const Config cfg = load(g);
      for (int i = 0; i < synth_count; ++i) {
        SynthConfig sc = cfg.synth;
        sc.seed = mix_seed(cfg.synth.seed, std::uint64_t(i));
        char name[32];
        std::snprintf(name, sizeof(name), "seq_%03d", i);
        write_mask_folder(fs::path(synth_out) / name, generate_sequence(sc));
      }
      write_json(fs::path(synth_out) / "synth.json", nlohmann::ordered_json(json(cfg.synth)));
      std::cout << "wrote " << synth_count << " sequences to " << synth_out << "\n";
    } else if (*train) {
      if (!train_resume.empty()) {
        auto t = Trainer::resume(train_resume, &std::cout);
        t.run(train_steps, train_out);
        std::cout << "saved " << train_out << " at step " << t.current_step() << "\n";
      } else {
        Config cfg = load(g);
        if (train_steps) cfg.train.steps = *train_steps;
        Trainer t(cfg, &std::cout);
        t.run(std::nullopt, train_out);
        std::cout << "saved " << train_out << " at step " << t.current_step() << "\n";
      }
    } else if (*track) {
      auto ck = load_checkpoint(track_ckpt);
      const auto fmt = parse_init(track_init);
      auto res = track_folder(ck.model, ck.manifest.config, load_mask_folder(track_seq), fmt);
      write_results(track_out, res, fmt);
      std::cout << "tracked " << res.size() << " frames (" << track_init << " init) -> " << track_out << "\n";
    } else if (*eval) {
      MetricsReport report;
      report.task = eval_task;
      const auto gts = sequence_dirs(eval_gt);
      const bool single = gts.size() == 1 && gts.front() == fs::path(eval_gt);
      for (const auto& gt : gts) {
        const fs::path pred = single ? fs::path(eval_pred) : fs::path(eval_pred) / gt.filename();
        report.sequences.push_back(evaluate_folder(pred, gt, eval_task));
      }
      report.aggregate();
      const std::string path =
          eval_report.empty() ? (fs::path(eval_pred) / ("report_" + eval_task + ".json")).string() : eval_report;
      report.save(path);
      std::cout << std::fixed << std::setprecision(3);
      if (eval_task == "vot")
        std::cout << "AUC=" << report.auc << " P=" << report.precision << " P_N=" << report.norm_precision << "\n";
      else
        std::cout << "J=" << report.J << " F=" << report.F << " G=" << report.G << "\n";
    } else if (*ablate) {
      if (!head_name.empty()) flags.head = json(head_name).get<BoxHeadKind>();
      Config cfg = apply_ablation(load(g), flags);
      if (ablate_steps) cfg.train.steps = *ablate_steps;
      const auto held = held_out_sequences(cfg.synth, ablate_heldout);
      TrackerModel model{nullptr};
      const auto v = train_and_score(cfg, held, &std::cout, &model);
      if (!ablate_ckpt.empty()) save_checkpoint(ablate_ckpt, model, nullptr, {kCheckpointFormat, cfg.train.steps, cfg});
      nlohmann::ordered_json j;
      j["variant"] = {{"no_bidr_ca", flags.no_dual_cross_attention},
                      {"no_recon", flags.no_mask_reconstruction},
                      {"head", json(cfg.model.box_head)}};
      j["steps"] = cfg.train.steps;
      j["held_out"] = ablate_heldout;
      j["final_loss"] = v.final_loss;
      auto scores = [](const TrackingScores& s) {
        return nlohmann::ordered_json{{"mask_iou", s.mask_iou}, {"box_iou", s.box_iou}, {"consistency", s.consistency}};
      };
      j["mask_init"] = scores(v.mask_init);
      j["box_init"] = scores(v.box_init);
      write_json(ablate_report, j);
      std::cout << std::fixed << std::setprecision(3) << "box-init mask IoU=" << v.box_init.mask_iou
                << " box IoU=" << v.box_init.box_iou << " mask-init mask IoU=" << v.mask_init.mask_iou << "\n";
    } else if (*viz) {
      auto ck = load_checkpoint(viz_ckpt);
      const auto fmt = parse_init(viz_init);
      const auto seq = relabel_targets(load_mask_folder(viz_seq), 0);
      auto res = track_sequence(ck.model, ck.manifest.config.memory, seq.frames, reference_from(seq.labels.front(), fmt));
      fs::create_directories(viz_out);
      for (std::size_t t = 0; t < res.size(); ++t) {
        write_png_rgb((fs::path(viz_out) / ("overlay_" + frame_filename(int(t)))).string(),
                      overlay(seq.frames[t], res[t].labels, res[t].boxes));
        if (res[t].side_probs.defined())
          write_png_rgb((fs::path(viz_out) / ("pinpoints_" + frame_filename(int(t)))).string(),
                        pinpoint_mosaic(res[t].side_probs, seq.frames[t].height / 2, seq.frames[t].width / 2));
      }
      std::cout << "wrote " << res.size() << " overlays to " << viz_out << "\n";
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
