// Command-line front end: pretrain, finetune, eval, inspect-pool, gradcheck,
// gen-corpus. Exit codes: 0 ok, 1 usage/config, 2 numeric failure, 3 I/O.
#include <chrono>
#include <cstdio>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "dcp/errors.hpp"
#include "dcp/gradcheck_suite.hpp"
#include "dcp/harness.hpp"

namespace {

enum Exit { kOk = 0, kUsage = 1, kNumeric = 2, kIo = 3 };

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
};

void add_common(CLI::App* cmd, Common& c, bool needs_config) {
  auto* opt = cmd->add_option("--config", c.config_path, "JSON configuration file");
  if (needs_config) opt->required();
  cmd->add_option("--seed", c.seed, "override the configured seed");
  cmd->add_option("--out", c.out, "output directory")->capture_default_str();
}

dcp::RunConfig resolve_config(const Common& c) {
  dcp::RunConfig cfg = dcp::load_config(c.config_path);
  if (c.seed) dcp::apply_seed(cfg, *c.seed);
  cfg.validate();
  return cfg;
}

void print_rows(dcp::Task task, const std::vector<dcp::EvalRow>& rows) {
  for (const auto& r : rows) std::printf("%s %s %.6f\n", dcp::task_name(task), r.metric.c_str(), r.value);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic cross-modal prompt pre-training harness"};
  app.require_subcommand(1);

  Common common;
  std::string checkpoint;
  std::string task_id;
  std::size_t items = 0;
  std::size_t seeds = 100;

  auto* pretrain = app.add_subcommand("pretrain", "pre-train on the synthetic corpus");
  add_common(pretrain, common, true);

  auto* finetune = app.add_subcommand("finetune", "fine-tune a task head from a pre-training checkpoint");
  add_common(finetune, common, true);
  finetune->add_option("--checkpoint", checkpoint, "pre-training checkpoint")->required();
  finetune->add_option("--task", task_id, "vqa|pair_classify|image_classify|text_classify|retrieval|generation")
      ->required();

  auto* eval = app.add_subcommand("eval", "evaluate a fine-tuned checkpoint");
  add_common(eval, common, true);
  eval->add_option("--checkpoint", checkpoint, "fine-tuned checkpoint")->required();
  eval->add_option("--task", task_id, "task id")->required();
  eval->add_option("--items", items, "evaluation set size (0 = task default)");

  auto* inspect = app.add_subcommand("inspect-pool", "dump prompt-pool keys, usage and key cosines");
  add_common(inspect, common, true);
  inspect->add_option("--checkpoint", checkpoint, "checkpoint to inspect")->required();

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  add_common(gradcheck, common, false);
  gradcheck->add_option("--seeds", seeds, "random fixtures per case")->capture_default_str();

  auto* gen = app.add_subcommand("gen-corpus", "write the synthetic corpus as JSON lines");
  add_common(gen, common, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    app.exit(e, std::cerr, std::cerr);
    return kUsage;
  }

  try {
    if (*gradcheck) {
      const std::uint64_t base = common.seed.value_or(1);
      const auto t0 = std::chrono::steady_clock::now();
      auto report = dcp::run_gradcheck_suite(seeds, base, 1e-5, 1e-5, [](const dcp::GradCheckCaseResult& r) {
        std::printf("%-26s %s  max_rel_err %.3e  (%zu seeds, %zu failed", r.name.c_str(),
                    r.failures ? "FAIL" : "ok  ", r.max_rel_error, r.seeds, r.failures);
        if (r.failures) std::printf(", worst seed %llu param %s", static_cast<unsigned long long>(r.worst_seed),
                                    r.worst_param.c_str());
        std::printf(")\n");
        std::fflush(stdout);
      });
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::printf("gradcheck %s in %.1f s\n", report.passed ? "passed" : "FAILED", secs);
      return report.passed ? kOk : kNumeric;
    }

    const dcp::RunConfig cfg = resolve_config(common);
    const auto corpus = dcp::SyntheticCorpus::generate(cfg.corpus);

    if (*gen) {
      dcp::write_corpus(corpus, common.out);
      std::printf("wrote %zu pairs to %s/corpus.jsonl\n", corpus.size(), common.out.c_str());
      return kOk;
    }
    if (*pretrain) {
      dcp::PretrainModel model(cfg.model);
      dcp::write_text_file(std::filesystem::path(common.out) / "config.json", dcp::config_to_json(cfg));
      auto s = dcp::run_pretrain(cfg, corpus, model, common.out);
      std::printf("pretrain: %zu steps, eval l_total %.6f -> %.6f\n", s.steps, s.initial_eval, s.final_eval);
      std::printf("checkpoint %s\nmetrics %s\n", s.checkpoint.c_str(), s.metrics.c_str());
      return kOk;
    }
    if (*finetune) {
      const dcp::Task task = dcp::parse_task(task_id);
      auto s = dcp::run_finetune(cfg, corpus, dcp::read_checkpoint(checkpoint), task, common.out);
      std::printf("finetune %s: %zu steps, loss %.6f -> %.6f\n", task_id.c_str(), s.losses.size(),
                  s.losses.empty() ? 0.0 : s.losses.front(), s.losses.empty() ? 0.0 : s.losses.back());
      print_rows(task, s.eval);
      std::printf("checkpoint %s\n", s.checkpoint.c_str());
      return kOk;
    }
    if (*eval) {
      const dcp::Task task = dcp::parse_task(task_id);
      dcp::EvalOptions opts;
      opts.items = items;
      print_rows(task, dcp::run_eval(cfg, corpus, dcp::read_checkpoint(checkpoint), task, common.out, opts));
      return kOk;
    }
    if (*inspect) {
      dcp::run_inspect_pool(cfg, dcp::read_checkpoint(checkpoint), common.out);
      std::printf("wrote pool CSVs to %s\n", common.out.c_str());
      return kOk;
    }
  } catch (const dcp::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const dcp::IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const dcp::IntegrityError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const dcp::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumeric;
  }
  return kUsage;
}
