// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include <nlohmann/json.hpp>

#include "qarl/config.hpp"
#include "qarl/plotdata.hpp"

using namespace qarl;
namespace fs = std::filesystem;

namespace {

const fs::path kSource = QARL_SOURCE_DIR;
const std::string kCli = QARL_CLI;

struct Outcome {
  int code = -1;
  std::string output;  // stdout and stderr together
};

Outcome cli(const std::string& args) {
  const fs::path log = fs::temp_directory_path() / "qarl_test_cli_output.txt";
  const std::string cmd = "'" + kCli + "' " + args + " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  Outcome o;
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::ostringstream s;
  s << in.rdbuf();
  o.output = s.str();
  return o;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("qarl_test_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::string cfg(const std::string& name) { return "'" + (kSource / "configs" / (name + ".cfg")).string() + "'"; }

// Shrinks a run so the tests stay quick.
const std::string kQuick =
    " --quiet --set sim.steps=3 --set train_batch_size=8 --set ppo_mini_batch_size=4 --set rollout.n=4"
    " --set sim.eval_prompts=16";

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string l;
  while (std::getline(in, l)) out.push_back(l);
  return out;
}

// Three quick seeds of one configuration, shared by the plotdata tests.
const fs::path& three_seeds() {
  static const fs::path dir = [] {
    const fs::path d = scratch("three");
    const auto o = cli("run " + cfg("qarl_tbpo") + kQuick + " --seeds 1,2,3 --out '" + d.string() + "'");
    REQUIRE(o.code == 0);
    return d;
  }();
  return dir;
}

std::string seed_dirs(const fs::path& root) {
  std::string s;
  for (int seed : {1, 2, 3}) s += " '" + (root / ("seed-" + std::to_string(seed))).string() + "'";
  return s;
}

}  // namespace

TEST_CASE("config files spell out the presets") {
  for (const auto& entry : fs::directory_iterator(kSource / "configs")) {
    if (entry.path().extension() != ".cfg") continue;
    const std::string name = entry.path().stem().string();
    INFO(name);
    CHECK(ExperimentConfig::load(entry.path().string()).to_text() == preset(name).to_text());
  }
}

TEST_CASE("study configs load and validate") {
  std::size_t n = 0;
  for (const auto& entry : fs::directory_iterator(kSource / "configs" / "studies")) {
    INFO(entry.path().string());
    const auto c = ExperimentConfig::load(entry.path().string());
    CHECK_NOTHROW(c.validate());
    CHECK(c.kernel_noise > 0.0);
    ++n;
  }
  CHECK(n > 0);
}

TEST_CASE("config parsing") {
  SECTION("round trip") {
    const ExperimentConfig c = preset("quantized_rollout_grpo");
    CHECK(ExperimentConfig::parse(c.to_text()).to_text() == c.to_text());
  }
  SECTION("comments, blanks and spacing") {
    const auto c = ExperimentConfig::parse("# header\n\n  optim.lr   =  0.5  # trailing\nrollout.n=3\n");
    CHECK(c.optim.lr == 0.5);
    CHECK(c.group_size == 3);
  }
  SECTION("unknown key names the key") {
    try {
      ExperimentConfig::parse("sim.bogus = 1\n");
      FAIL("no error");
    } catch (const ConfigError& e) {
      CHECK(e.key() == "sim.bogus");
    }
  }
  SECTION("bad values name the key") {
    for (const std::string line : {"optim.lr = fast", "rollout.n = 2.5", "objective.variant = ppo", "objective.tis = maybe",
                                   "sim.sampler_mode = gpu", "sim.quant = w3a3"}) {
      INFO(line);
      try {
        ExperimentConfig::parse(line);
        FAIL("no error");
      } catch (const ConfigError& e) {
        CHECK(line.starts_with(e.key()));
      }
    }
  }
  SECTION("validation") {
    ExperimentConfig c = preset("qarl_tbpo");
    c.learner_lowbit = false;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    ExperimentConfig d = preset("full_grpo");
    d.group_size = 0;
    CHECK_THROWS_AS(d.validate(), ConfigError);
  }
  SECTION("trainer keys map onto the objective") {
    const auto c = ExperimentConfig::parse("objective.variant = tbpo\nseq_clip_ratio_high = 0.07\nneg_seq_clip_ratio_high = 0.2\n"
                                           "seq_tis_imp_ratio_cap = 3\n");
    CHECK(c.objective.epsilon_high == 0.07);
    CHECK(c.objective.delta_high == 0.2);
    CHECK(c.objective.cap == 3.0);
  }
  SECTION("regime presets") {
    const auto q = preset("qarl_tbpo");
    CHECK(q.sampler_mode == SamplerMode::snapshot);
    CHECK(q.learner_mode().is_lowbit());
    CHECK(q.sampler_precision().spec == q.learner_mode().spec);
    const auto r = preset("quantized_rollout_grpo");
    CHECK(r.sampler_precision().is_lowbit());
    CHECK_FALSE(r.learner_mode().is_lowbit());
    CHECK_THROWS_AS(preset("fast_grpo"), ConfigError);
    CHECK(preset("full_grpo_onpolicy").effective_epochs() == 1);
  }
}

TEST_CASE("config hash changes iff content changes") {
  const ExperimentConfig a = preset("qarl_tbpo");
  ExperimentConfig b = a;
  CHECK(a.content_hash() == b.content_hash());
  b.seed = 99;
  b.output_dir = "elsewhere";
  CHECK(a.content_hash() == b.content_hash());
  for (const auto& key : ExperimentConfig::keys()) {
    if (key == "sim.seed" || key == "sim.output_dir") continue;
    ExperimentConfig c = a;
    const std::string v = c.get(key);
    // A different valid value for each key.
    for (const std::string alt : {"3", "0.3", "false", "true", "grpo", "lowbit", "full", "w8a16", "reverse", "relu", "x"}) {
      if (alt == v) continue;
      try {
        c.set(key, alt);
      } catch (const ConfigError&) {
        continue;
      }
      break;
    }
    INFO(key);
    if (c.get(key) != v) CHECK(c.content_hash() != a.content_hash());
  }
}

TEST_CASE("run") {
  SECTION("three seeds, three directories and a manifest") {
    const fs::path d = three_seeds();
    for (int seed : {1, 2, 3}) {
      const fs::path s = d / ("seed-" + std::to_string(seed));
      for (const char* f : {"config.cfg", "metrics.jsonl", "checkpoint.qckp", "eval.json"}) CHECK(fs::exists(s / f));
      CHECK(ExperimentConfig::load((s / "config.cfg").string()).seed == static_cast<std::uint64_t>(seed));
    }
    const auto m = nlohmann::json::parse(slurp(d / "manifest.json"));
    CHECK(m.at("seeds") == nlohmann::json::array({1, 2, 3}));
    CHECK(m.at("runs").size() == 3);
    CHECK(m.at("artifact_version").get<std::string>().size() > 0);
    const auto stored = ExperimentConfig::load((d / "seed-1" / "config.cfg").string());
    CHECK(m.at("config_hash").get<std::string>() == stored.content_hash());
    for (const auto& r : m.at("runs")) CHECK(fs::exists(r.at("path").get<std::string>()));
  }
  SECTION("overrides are reflected in the stored config") {
    const fs::path d = scratch("override");
    const auto o = cli("run " + cfg("qarl_tbpo") + kQuick + " --set objective.variant=grpo --out '" + d.string() + "'");
    REQUIRE(o.code == 0);
    const auto stored = ExperimentConfig::load((d / "seed-1" / "config.cfg").string());
    CHECK(stored.objective.variant == Variant::grpo);
    CHECK(stored.steps == 3);
    fs::remove_all(d);
  }
  SECTION("unknown key exits 2 and names it") {
    const auto o = cli("run " + cfg("qarl_tbpo") + " --set sim.no_such_key=1 --out '" + scratch("bad").string() + "'");
    CHECK(o.code == 2);
    CHECK(o.output.find("sim.no_such_key") != std::string::npos);
  }
  SECTION("invalid value exits 2 and names the key") {
    const auto o = cli("run " + cfg("qarl_tbpo") + " --set optim.lr=abc");
    CHECK(o.code == 2);
    CHECK(o.output.find("optim.lr") != std::string::npos);
  }
  SECTION("missing config file exits 2") {
    CHECK(cli("run /nonexistent/x.cfg").code == 2);
  }
  SECTION("bad seed list exits 2") {
    CHECK(cli("run " + cfg("qarl_tbpo") + " --seeds 1,x").code == 2);
  }
  SECTION("missing subcommand exits 2") {
    CHECK(cli("").code == 2);
  }
}

TEST_CASE("check") {
  SECTION("fresh build passes within a minute") {
    const auto t0 = std::chrono::steady_clock::now();
    const auto o = cli("check");
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    INFO(o.output);
    CHECK(o.code == 0);
    CHECK(o.output.find("FAIL") == std::string::npos);
    CHECK(secs < 60.0);
  }
  SECTION("corrupted rounding fails the quantization oracle") {
    for (const char* fault : {"truncate-rounding", "half-away-rounding"}) {
      const auto o = cli(std::string("check --inject-fault ") + fault);
      INFO(o.output);
      CHECK(o.code == 1);
      CHECK(o.output.find("FAIL quantization oracle") != std::string::npos);
    }
  }
  SECTION("unknown fault is a usage error") {
    CHECK(cli("check --inject-fault gremlins").code == 2);
  }
}

TEST_CASE("plotdata") {
  const fs::path d = three_seeds();
  SECTION("documented headers") {
    for (const auto& [kind, name] : plot_kinds()) {
      const auto o = cli("plotdata " + name + seed_dirs(d));
      REQUIRE(o.code == 0);
      CHECK(lines(o.output).front() == plot_header(kind));
    }
    CHECK(plot_header(PlotKind::reward_curve) == "step,mean,min,max");
    CHECK(plot_header(PlotKind::ratio_hist) == "bin,log_lower,log_upper,count,fraction");
  }
  SECTION("reward curve over three seeds") {
    const auto o = cli("plotdata reward_curve" + seed_dirs(d));
    REQUIRE(o.code == 0);
    const auto ls = lines(o.output);
    REQUIRE(ls.size() == 4);  // header + 3 steps
    for (std::size_t i = 1; i < ls.size(); ++i) {
      double step, mean, lo, hi;
      char c1, c2, c3;
      std::istringstream row(ls[i]);
      REQUIRE(static_cast<bool>(row >> step >> c1 >> mean >> c2 >> lo >> c3 >> hi));
      CHECK(step == static_cast<double>(i - 1));
      CHECK(lo <= mean);
      CHECK(mean <= hi);
    }
  }
  SECTION("aligned runs put every mismatch weight in the unit bin") {
    const auto o = cli("plotdata mismatch_hist" + seed_dirs(d));
    REQUIRE(o.code == 0);
    const auto ls = lines(o.output);
    REQUIRE(ls.size() == static_cast<std::size_t>(kHistBins) + 1);
    for (int b = 0; b < kHistBins; ++b) {
      const std::string& row = ls[static_cast<std::size_t>(b) + 1];
      const double fraction = std::stod(row.substr(row.rfind(',') + 1));
      CHECK(fraction == (b == kHistBins / 2 ? 1.0 : 0.0));
    }
  }
  SECTION("byte-identical output, file or stdout") {
    const fs::path out = scratch("curve.csv");
    const auto a = cli("plotdata kl_curve" + seed_dirs(d));
    const auto b = cli("plotdata kl_curve" + seed_dirs(d) + " -o '" + out.string() + "'");
    REQUIRE(a.code == 0);
    REQUIRE(b.code == 0);
    CHECK(slurp(out) == a.output);
    fs::remove(out);
  }
  SECTION("identical config and seed give identical CSV") {
    const fs::path again = scratch("again");
    REQUIRE(cli("run " + cfg("qarl_tbpo") + kQuick + " --seeds 1,2,3 --out '" + again.string() + "'").code == 0);
    for (const char* kind : {"reward_curve", "entropy_curve", "ratio_hist"})
      CHECK(cli(std::string("plotdata ") + kind + seed_dirs(d)).output ==
            cli(std::string("plotdata ") + kind + seed_dirs(again)).output);
    fs::remove_all(again);
  }
  SECTION("empty run set is an error, not an empty file") {
    const fs::path out = scratch("empty.csv");
    const auto o = cli("plotdata reward_curve -o '" + out.string() + "'");
    CHECK(o.code == 2);
    CHECK_FALSE(fs::exists(out));
  }
  SECTION("mixed configurations are rejected") {
    const fs::path other = scratch("other");
    REQUIRE(cli("run " + cfg("quantized_rollout_grpo") + kQuick + " --out '" + other.string() + "'").code == 0);
    const auto o = cli("plotdata reward_curve '" + (d / "seed-1").string() + "' '" + (other / "seed-1").string() + "'");
    CHECK(o.code == 2);
    CHECK(o.output.find("different configurations") != std::string::npos);
    fs::remove_all(other);
  }
  SECTION("unknown kind and missing directories are errors") {
    CHECK(cli("plotdata spectrum" + seed_dirs(d)).code == 2);
    CHECK(cli("plotdata reward_curve /nonexistent/run").code == 2);
  }
}
