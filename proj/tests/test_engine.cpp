#include <gtest/gtest.h>
#include <torch/torch.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mits/mits.hpp"

using namespace mits;
namespace fs = std::filesystem;

namespace {

Config tiny_config() {
  Config cfg;
  cfg.model.image_height = cfg.model.image_width = 64;
  cfg.model.channels = 32;
  cfg.model.heads = 4;
  cfg.model.bank_capacity = 4;
  cfg.model.propagation_layers = 1;
  cfg.model.bidr_layers = 1;
  cfg.model.box_layers = 1;
  cfg.synth.height = cfg.synth.width = 64;
  cfg.synth.min_objects = 2;
  cfg.synth.max_objects = 3;
  cfg.synth.min_size = 10;
  cfg.synth.max_size = 24;
  cfg.synth.length = 8;
  cfg.synth.seed = 5;
  cfg.train.steps = 200;
  cfg.train.num_sequences = 2;
  cfg.train.lr = 1e-3;
  cfg.train.random_assignment = false;
  cfg.train.log_every = 1;
  return cfg;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("mits_test_engine_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

SequenceSample three_object_sequence() {
  auto cfg = tiny_config();
  cfg.synth.min_objects = cfg.synth.max_objects = 3;
  cfg.synth.occlusion_probability = 0;
  for (std::uint64_t seed = 0;; ++seed) {
    cfg.synth.seed = seed;
    auto s = relabel_targets(generate_sequence(cfg.synth), 0);
    if (s.num_objects() == 3) return s;
  }
}

int run_cli(const std::string& args, std::string* output = nullptr) {
  const auto log = fs::temp_directory_path() / "mits_cli_out.txt";
  const std::string cmd = std::string(MITS_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  if (output) {
    std::ifstream f(log);
    std::stringstream ss;
    ss << f.rdbuf();
    *output = ss.str();
  }
  return rc;
}

}  // namespace

class TrackerTest : public ::testing::Test {
 protected:
  void SetUp() override {
    torch::manual_seed(0);
    torch::set_num_threads(1);
    cfg = tiny_config();
    model = TrackerModel(cfg);
    model->eval();
    seq = three_object_sequence();
  }
  Config cfg;
  TrackerModel model{nullptr};
  SequenceSample seq;
};

TEST_F(TrackerTest, ErrorsBeforeAndDuringInitialization) {
  TrackerSession s(model, cfg.memory);
  try {
    s.step(seq.frames[1]);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::InitFormatMismatch);
  }
  EXPECT_THROW(s.initialize(seq.frames[0], LabelMap(10, 10, 1)), Error);
  EXPECT_THROW(s.initialize(seq.frames[0], std::vector<Box>{}), Error);
  EXPECT_THROW(s.initialize(seq.frames[0], std::vector<Box>{Box{5, 5, 2, 2}}), Error);
  s.initialize(seq.frames[0], seq.labels[0]);
  EXPECT_THROW(s.initialize(seq.frames[0], seq.labels[0]), Error);
  try {
    s.step(Image(32, 32));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::ShapeMismatch);
  }
  LabelMap absent(64, 64, 2);
  absent(0, 0) = 1;
  try {
    reference_from(absent, InitFormat::Box);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::InitFormatMismatch);
  }
  IDAssignment wrong;
  wrong.bank = {1};
  TrackerSession t(model, cfg.memory, wrong);
  EXPECT_THROW(t.initialize(seq.frames[0], seq.labels[0]), Error);
}

TEST_F(TrackerTest, EmitsBothFormatsEveryFrame) {
  for (auto fmt : {InitFormat::Mask, InitFormat::Box}) {
    auto res = track_sequence(model, cfg.memory, seq.frames, reference_from(seq.labels[0], fmt));
    ASSERT_EQ(int(res.size()), seq.length());
    for (const auto& r : res) {
      EXPECT_EQ(r.labels.rows(), 64);
      EXPECT_EQ(r.boxes.size(), 3u);
      EXPECT_EQ(r.mask_boxes.size(), 3u);
      EXPECT_EQ(r.consistency.size(), 3u);
      for (int k = 0; k < 3; ++k) EXPECT_EQ(r.boxes[k].has_value(), bool(r.present[k]));
    }
    if (fmt == InitFormat::Box)
      for (int k = 0; k < 3; ++k) EXPECT_EQ(res[0].boxes[k], seq.boxes[0][k]);
    else
      EXPECT_EQ(res[0].labels, seq.labels[0]);
  }
  EXPECT_FALSE(model->is_training());
}

TEST_F(TrackerTest, AbsentObjectsAreErasedAndSuppressed) {
  auto c = cfg;
  c.model.absent_mass = 1e12;
  TrackerModel strict(c);
  strict->eval();
  auto res = track_sequence(strict, cfg.memory, seq.frames, seq.labels[0]);
  for (std::size_t t = 1; t < res.size(); ++t)
    for (int k = 0; k < 3; ++k) {
      EXPECT_FALSE(res[t].present[k]);
      EXPECT_FALSE(res[t].boxes[k].has_value());
      EXPECT_FALSE(res[t].mask_boxes[k].has_value());
      EXPECT_EQ(res[t].consistency[k], 1.0);
    }
}

TEST_F(TrackerTest, ReferenceStaysInMemory) {
  TrackerSession s(model, MemoryConfig{2, 3});
  s.initialize(seq.frames[0], seq.labels[0]);
  for (int rep = 0; rep < 3; ++rep)
    for (int t = 1; t < seq.length(); ++t) {
      s.step(seq.frames[t]);
      ASSERT_EQ(s.memory().frame_indices().front(), 0);
      ASSERT_LE(s.memory().size(), 3u);
    }
}

TEST_F(TrackerTest, IdentityPermutationEquivariance) {
  // Objects (1, 2, 3) -> (3, 1, 2), with each object keeping its bank row.
  const std::vector<int> perm{0, 3, 1, 2};
  SequenceSample p = seq;
  for (auto& lm : p.labels)
    for (auto& v : lm.grid.data()) v = std::uint8_t(perm[v]);
  derive_boxes(p);
  IDAssignment a, b;
  a.bank = {2, 4, 1};
  b.bank.resize(3);
  for (int k = 0; k < 3; ++k) b.bank[perm[k + 1] - 1] = a.bank[k];
  for (auto fmt : {InitFormat::Mask, InitFormat::Box}) {
    auto ra = track_sequence(model, cfg.memory, seq.frames, reference_from(seq.labels[0], fmt), a);
    auto rb = track_sequence(model, cfg.memory, p.frames, reference_from(p.labels[0], fmt), b);
    for (int t = 0; t < seq.length(); ++t) {
      auto relabelled = ra[t].labels;
      for (auto& v : relabelled.grid.data()) v = std::uint8_t(perm[v]);
      ASSERT_EQ(relabelled, rb[t].labels) << "frame " << t;
      for (int k = 0; k < 3; ++k) {
        const int j = perm[k + 1] - 1;
        ASSERT_EQ(ra[t].boxes[k], rb[t].boxes[j]);
        ASSERT_EQ(ra[t].mask_mass[k], rb[t].mask_mass[j]);
        ASSERT_EQ(ra[t].present[k], rb[t].present[j]);
        if (ra[t].side_probs.defined())
          ASSERT_TRUE(torch::equal(ra[t].side_probs.select(1, k), rb[t].side_probs.select(1, j)));
      }
    }
  }
}

TEST_F(TrackerTest, MaskPathNeverCallsRefiner) {
  model->uidm->bidr->calls = 0;
  track_sequence(model, cfg.memory, seq.frames, seq.labels[0]);
  EXPECT_EQ(model->uidm->bidr->calls, 0);
  track_sequence(model, cfg.memory, seq.frames, reference_from(seq.labels[0], InitFormat::Box));
  EXPECT_EQ(model->uidm->bidr->calls, 1);
}

TEST(Checkpoint, RoundTripIsIdempotent) {
  torch::manual_seed(1);
  auto cfg = tiny_config();
  TrackerModel model(cfg);
  auto dir = scratch("ckpt");
  const auto a = (dir / "a.pt").string(), b = (dir / "b.pt").string();
  save_checkpoint(a, model, nullptr, {kCheckpointFormat, 17, cfg});
  auto ck = load_checkpoint(a);
  EXPECT_EQ(ck.manifest.step, 17);
  EXPECT_EQ(to_json_value(ck.manifest.config), to_json_value(cfg));
  EXPECT_FALSE(ck.has_optimizer);
  auto pa = model->named_parameters(), pb = ck.model->named_parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (const auto& kv : pa) EXPECT_TRUE(torch::equal(kv.value(), pb[kv.key()])) << kv.key();
  save_checkpoint(b, ck.model, nullptr, ck.manifest);
  auto again = load_checkpoint(b);
  for (const auto& kv : pa) EXPECT_TRUE(torch::equal(kv.value(), again.model->named_parameters()[kv.key()]));

  auto seq = three_object_sequence();
  auto r1 = track_sequence(model, cfg.memory, seq.frames, seq.labels[0]);
  auto r2 = track_sequence(again.model, cfg.memory, seq.frames, seq.labels[0]);
  for (std::size_t t = 0; t < r1.size(); ++t) {
    EXPECT_EQ(r1[t].labels, r2[t].labels);
    EXPECT_EQ(r1[t].boxes, r2[t].boxes);
  }
}

TEST(Checkpoint, Errors) {
  try {
    load_checkpoint("/nonexistent/x.pt");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::IoError);
  }
  auto dir = scratch("ckpt_bad");
  std::ofstream((dir / "junk.pt").string()) << "not an archive";
  EXPECT_THROW(load_checkpoint((dir / "junk.pt").string()), Error);
}

TEST(Training, ResumeReproducesUninterruptedLosses) {
  torch::set_num_threads(1);
  auto cfg = tiny_config();
  cfg.train.steps = 6;
  Trainer full(cfg);
  full.run();
  Trainer first(cfg);
  first.run(3);
  auto dir = scratch("resume");
  const auto path = (dir / "mid.pt").string();
  first.save(path);
  auto resumed = Trainer::resume(path);
  EXPECT_EQ(resumed.current_step(), 3);
  resumed.run();
  ASSERT_EQ(resumed.history().size(), 3u);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(resumed.history()[i].loss, full.history()[3 + i].loss) << "step " << 3 + i;
  for (int i = 0; i < 3; ++i) EXPECT_EQ(first.history()[i].loss, full.history()[i].loss);
}

TEST(Training, LogsReflectSampledObjective) {
  auto cfg = tiny_config();
  cfg.train.steps = 12;
  cfg.train.p_box = 0.3;
  std::ostringstream log;
  Trainer t(cfg, &log);
  t.run();
  std::istringstream lines(log.str());
  std::string line;
  int n = 0;
  while (std::getline(lines, line)) {
    std::mt19937_64 rng(mix_seed(cfg.train.seed, std::uint64_t(n)));
    const bool box = sample_objective(0.3, rng).init_format == InitFormat::Box;
    EXPECT_NE(line.find(box ? "init box" : "init mask"), std::string::npos) << line;
    EXPECT_EQ(t.history()[n].init_format == InitFormat::Box, box);
    ++n;
  }
  EXPECT_EQ(n, 12);
}

TEST(Training, LossDecreases) {
  torch::set_num_threads(1);
  auto cfg = tiny_config();
  Trainer t(cfg);
  t.run();
  auto mean = [&](int from, int to) {
    double s = 0;
    for (int i = from; i < to; ++i) s += t.history()[i].loss;
    return s / (to - from);
  };
  EXPECT_LT(mean(180, 200), mean(0, 20));
}

TEST(Training, NonFiniteLossAbortsWithStep) {
  auto cfg = tiny_config();
  Trainer t(cfg);
  t.step();
  {
    torch::NoGradGuard g;
    t.model()->mask_decoder->head->parameters().back().fill_(std::numeric_limits<float>::quiet_NaN());
  }
  try {
    t.step();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::NonFiniteLoss);
    EXPECT_EQ(e.index(), 1);
  }
}

TEST(Training, EmptyPoolAndBadConfig) {
  auto cfg = tiny_config();
  try {
    ClipSource(cfg, {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::DataSourceEmpty);
  }
  cfg.train.p_box = 2;
  EXPECT_THROW(Trainer{cfg}, Error);
}

TEST(Training, ClipsFollowTargetsOfFirstFrame) {
  auto cfg = tiny_config();
  cfg.train.random_assignment = true;
  ClipSource src(cfg);
  std::mt19937_64 rng(3);
  for (int i = 0; i < 50; ++i) {
    SequenceSample storage;
    auto clip = src.sample(rng, storage);
    ASSERT_EQ(int(clip.frames.size()), cfg.train.clip_frames);
    const int n = clip.labels[0].num_objects;
    ASSERT_EQ(clip.assignment.size(), n);
    clip.assignment.validate(cfg.model.bank_capacity);
    auto boxes = label_boxes(clip.labels[0]);
    for (const auto& b : boxes) EXPECT_TRUE(b.has_value());
  }
}

TEST(Evaluate, PerfectTrackingScoresOne) {
  auto seq = three_object_sequence();
  std::vector<FrameResult> res(seq.length());
  for (int t = 0; t < seq.length(); ++t) {
    res[t].labels = seq.labels[t];
    res[t].boxes = seq.boxes[t];
    res[t].consistency = branch_consistency(seq.boxes[t], seq.boxes[t]);
  }
  auto r = report_sequence(seq, res, "vot");
  EXPECT_DOUBLE_EQ(r.vot.auc, 1.0);
  EXPECT_DOUBLE_EQ(r.consistency, 1.0);
  auto v = report_sequence(seq, res, "vos");
  EXPECT_DOUBLE_EQ(v.vos.J, 1.0);
  EXPECT_DOUBLE_EQ(v.vos.F, 1.0);
}

TEST(Evaluate, HeldOutSeedsDifferFromTrainingPool) {
  auto cfg = tiny_config();
  cfg.train.num_sequences = 4;
  ClipSource src(cfg);
  auto held = held_out_sequences(cfg.synth, 4);
  for (const auto& h : held)
    for (const auto& p : src.pool()) EXPECT_NE(h.frames, p.frames);
}

TEST(Cli, EndToEnd) {
  auto dir = scratch("cli");
  std::ofstream(dir / "config.json") << to_json_value(tiny_config()).dump();
  const std::string cfg = "--config " + (dir / "config.json").string();
  std::string out;
  ASSERT_EQ(run_cli(cfg + " --seed 3 synth --out " + (dir / "data").string() + " --count 2", &out), 0) << out;
  const auto seq = (dir / "data" / "seq_000").string();
  ASSERT_TRUE(fs::exists(dir / "data" / "seq_001" / "boxes.txt"));

  ASSERT_EQ(run_cli(cfg + " train --steps 2 --out " + (dir / "m.pt").string(), &out), 0) << out;
  EXPECT_NE(out.find("step 1 loss"), std::string::npos) << out;

  for (const char* init : {"box", "mask"}) {
    const auto res = (dir / (std::string("track_") + init)).string();
    ASSERT_EQ(run_cli("track --checkpoint " + (dir / "m.pt").string() + " --sequence " + seq + " --init " + init +
                          " --out " + res,
                      &out),
              0)
        << out;
    EXPECT_TRUE(fs::exists(fs::path(res) / "boxes.txt"));
    EXPECT_TRUE(fs::exists(fs::path(res) / "masks" / frame_filename(7)));
    EXPECT_TRUE(fs::exists(fs::path(res) / "result.json"));
  }

  ASSERT_EQ(run_cli("eval --task vot --pred " + seq + " --gt " + seq, &out), 0) << out;
  EXPECT_NE(out.find("AUC=1.000"), std::string::npos) << out;
  ASSERT_EQ(run_cli("eval --task vos --pred " + seq + " --gt " + seq, &out), 0) << out;
  EXPECT_NE(out.find("J=1.000 F=1.000"), std::string::npos) << out;
  auto report = json::parse(std::ifstream(fs::path(seq) / "report_vos.json"));
  EXPECT_EQ(report["task"], "vos");
  EXPECT_DOUBLE_EQ(report["aggregate"]["G"].get<double>(), 1.0);
  ASSERT_EQ(run_cli("eval --task vot --pred " + (dir / "data").string() + " --gt " + (dir / "data").string() +
                        " --report " + (dir / "all.json").string(),
                    &out),
            0)
      << out;
  EXPECT_EQ(json::parse(std::ifstream(dir / "all.json"))["sequences"].size(), 2u);

  ASSERT_EQ(run_cli("viz --checkpoint " + (dir / "m.pt").string() + " --sequence " + seq + " --init box --out " +
                        (dir / "viz").string(),
                    &out),
            0)
      << out;
  EXPECT_TRUE(fs::exists(dir / "viz" / ("overlay_" + frame_filename(0))));
  EXPECT_TRUE(fs::exists(dir / "viz" / ("pinpoints_" + frame_filename(3))));

  ASSERT_EQ(run_cli(cfg + " ablate --no-bidr-ca --no-recon --head corner --steps 2 --held-out 1 --report " +
                        (dir / "ablate.json").string(),
                    &out),
            0)
      << out;
  auto ab = json::parse(std::ifstream(dir / "ablate.json"));
  EXPECT_EQ(ab["variant"]["head"], "corner");
  EXPECT_TRUE(ab["box_init"].contains("mask_iou"));

  EXPECT_NE(run_cli("track --checkpoint " + (dir / "m.pt").string() + " --sequence /nonexistent --out /tmp/x", &out), 0);
  EXPECT_NE(out.find("error"), std::string::npos);
}
