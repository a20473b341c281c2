// SPDX-License-Identifier: Apache-2.0
//
// vikdf command line. Subcommands: pretrain, finetune, infer, textualize,
// eval, ablate, sweep-queries, gen-data, grad-check. Every run prints its
// resolved configuration before doing work; failures exit 1 with a single
// `error[category]: message` line (usage problems exit 2).

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "vikdf/checkpoint.hpp"
#include "vikdf/gradcheck.hpp"
#include "vikdf/metrics.hpp"
#include "vikdf/pipeline.hpp"

namespace fs = std::filesystem;
using namespace vikdf;

namespace {

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out_dir;
};

void add_common(CLI::App* cmd, CommonOpts& c, const std::string& default_out) {
  c.out_dir = default_out;
  cmd->add_option("--config", c.config_path, "Key=value config file");
  cmd->add_option("--set", c.sets, "Config override, key=value (repeatable)");
  auto* o = cmd->add_option("--out", c.out_dir, "Output directory");
  if (!default_out.empty()) o->capture_default_str();
}

void apply_sets(ModelConfig& cfg, const std::vector<std::string>& sets) {
  for (const auto& kv : sets) {
    if (kv.find('=') == std::string::npos)
      throw UsageError("--set expects key=value, got '" + kv + "'");
    cfg.apply_text(kv);
  }
}

ModelConfig resolve_config(const CommonOpts& c) {
  ModelConfig cfg = c.config_path.empty() ? ModelConfig{} : ModelConfig::from_file(c.config_path);
  apply_sets(cfg, c.sets);
  cfg.validate();
  return cfg;
}

// Base config from a checkpoint, then file/--set overrides on top. The file
// is applied as raw text so only the keys it actually names change.
ModelConfig resolve_config_from(const std::string& ckpt, const CommonOpts& c) {
  ModelConfig cfg = peek_checkpoint_config(ckpt);
  if (!c.config_path.empty()) {
    std::ifstream is(c.config_path, std::ios::binary);
    if (!is) throw IoError("cannot open config file '" + c.config_path + "'");
    std::ostringstream buf;
    buf << is.rdbuf();
    cfg.apply_text(buf.str());
  }
  apply_sets(cfg, c.sets);
  cfg.validate();
  return cfg;
}

fs::path prepare_out(const std::string& dir) {
  fs::path p(dir);
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create output directory '" + dir + "': " + ec.message());
  return p;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os << text;
  if (!os.good()) throw IoError("write failed on '" + path.string() + "'");
}

void print_config(const ModelConfig& cfg) {
  std::cout << "# resolved config\n" << cfg.serialize() << std::flush;
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

PairSet load_or_generate_pairs(const std::string& records, const std::string& images,
                               const ModelConfig& cfg) {
  if (records.empty() != images.empty())
    throw UsageError("--pairs and --images must be given together");
  PairSet set = records.empty() ? generate_synthetic_pairs(cfg.data_seed, cfg.train_pairs,
                                                           cfg.attribute_count, cfg.image_size)
                                : load_pairs(records, images);
  if (cfg.shuffle_attributes) shuffle_pair_attributes(set, cfg.data_seed + 911);
  return set;
}

struct TrainUtil {
  std::ofstream log, timing;

  TrainUtil(const fs::path& out, bool append) {
    auto mode = std::ios::binary | (append ? std::ios::app : std::ios::trunc);
    log.open(out / "train_log.jsonl", mode);
    timing.open(out / "timing.log", mode);
    if (!log || !timing) throw IoError("cannot open log files under '" + out.string() + "'");
  }

  template <typename StepFn>
  void run(TrainState& st, const fs::path& out, std::int64_t ckpt_every, StepFn step_fn) {
    while (st.step < st.model.cfg.total_steps) {
      auto t0 = std::chrono::steady_clock::now();
      TrainLogRecord rec = step_fn(st);
      auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                    std::chrono::steady_clock::now() - t0)
                    .count();
      log << format_log_record(rec) << '\n' << std::flush;
      timing << "step " << rec.step << " ms " << ms << '\n' << std::flush;
      if (ckpt_every > 0 && rec.step % ckpt_every == 0 && rec.step < st.model.cfg.total_steps)
        save_checkpoint((out / ("checkpoint_step" + std::to_string(rec.step) + ".ckpt")).string(),
                        st.model, &st.opt, st.step, st.data_rng);
    }
    save_checkpoint((out / "checkpoint_final.ckpt").string(), st.model, &st.opt, st.step,
                    st.data_rng);
  }
};

TrainLogRecord last_pretrain_record(TrainState& st, const PairSet& corpus, const fs::path& out,
                                    std::int64_t ckpt_every, bool append) {
  TrainLogRecord last;
  TrainUtil util(out, append);
  util.run(st, out, ckpt_every, [&](TrainState& s) {
    last = pretrain_step(s, corpus);
    return last;
  });
  return last;
}

DecodeOptions decode_options(const ModelConfig& cfg, const std::string& mode, std::int64_t top_k,
                             double temperature, std::uint64_t seed, std::int64_t max_len) {
  DecodeOptions d;
  d.mode = mode;
  d.top_k = top_k;
  d.temperature = temperature;
  d.seed = seed;
  d.max_len = max_len > 0 ? max_len : cfg.max_decode_len;
  return d;
}

// Loads parameters only; optimizer and data RNG stay fresh.
void load_params(const std::string& ckpt, VikdfModel& model) {
  Rng scratch;
  load_checkpoint(ckpt, model, nullptr, scratch);
}

std::string csv_escape(const std::string& s) {
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += "\"\"";
    else if (ch == '\n') out += "\\n";
    else out += ch;
  }
  out += '"';
  return out;
}

struct ProbeData {
  PairSet train, test;
};
ProbeData probe_data(const ModelConfig& cfg, std::int64_t count) {
  ProbeData pd{generate_synthetic_pairs(cfg.data_seed + 101, count, cfg.attribute_count,
                                        cfg.image_size),
               generate_synthetic_pairs(cfg.data_seed + 202, count, cfg.attribute_count,
                                        cfg.image_size)};
  if (cfg.shuffle_attributes) {
    shuffle_pair_attributes(pd.train, cfg.data_seed + 303);
    shuffle_pair_attributes(pd.test, cfg.data_seed + 404);
  }
  return pd;
}

int run_app(int argc, char** argv) {
  CLI::App app{"Desk-scale visual implicit knowledge distillation and fusion"};
  app.require_subcommand(1);

  // ---- pretrain ----
  CommonOpts pre_c;
  std::string pre_pairs, pre_images, pre_resume;
  std::int64_t pre_ckpt_every = 0;
  auto* pre = app.add_subcommand("pretrain", "Concurrent two-stage training on image-text pairs");
  add_common(pre, pre_c, "out");
  pre->add_option("--pairs", pre_pairs, "Pair corpus records (.jsonl)");
  pre->add_option("--images", pre_images, "Pair corpus image sidecar");
  pre->add_option("--resume", pre_resume, "Checkpoint to resume from");
  pre->add_option("--checkpoint-every", pre_ckpt_every, "Also checkpoint every N steps")
      ->capture_default_str();
  pre->callback([&] {
    ModelConfig cfg = pre_resume.empty() ? resolve_config(pre_c)
                                         : resolve_config_from(pre_resume, pre_c);
    print_config(cfg);
    fs::path out = prepare_out(pre_c.out_dir);
    write_text(out / "config.txt", cfg.serialize());
    PairSet corpus = load_or_generate_pairs(pre_pairs, pre_images, cfg);
    TrainState st(cfg);
    if (!pre_resume.empty()) st.step = load_checkpoint(pre_resume, st.model, &st.opt, st.data_rng);
    last_pretrain_record(st, corpus, out, pre_ckpt_every, !pre_resume.empty());
    std::cout << "checkpoint: " << (out / "checkpoint_final.ckpt").string() << '\n';
  });

  // ---- finetune ----
  CommonOpts ft_c;
  std::string ft_ckpt, ft_resume, ft_dialogues;
  std::int64_t ft_ckpt_every = 0;
  auto* ft = app.add_subcommand("finetune", "Text-only fine-tuning on dialogue data");
  add_common(ft, ft_c, "out");
  ft->add_option("--ckpt", ft_ckpt, "Pretrained checkpoint to start from");
  ft->add_option("--resume", ft_resume, "Fine-tuning checkpoint to resume");
  ft->add_option("--dialogues", ft_dialogues, "Dialogue corpus (.jsonl)")->required();
  ft->add_option("--checkpoint-every", ft_ckpt_every, "Also checkpoint every N steps")
      ->capture_default_str();
  ft->callback([&] {
    if (ft_ckpt.empty() == ft_resume.empty())
      throw UsageError("finetune needs exactly one of --ckpt or --resume");
    const std::string& base = ft_ckpt.empty() ? ft_resume : ft_ckpt;
    ModelConfig cfg = resolve_config_from(base, ft_c);
    print_config(cfg);
    fs::path out = prepare_out(ft_c.out_dir);
    write_text(out / "config.txt", cfg.serialize());
    std::vector<DialogueSample> corpus = load_dialogue_corpus(ft_dialogues);
    TrainState st(cfg);
    if (!ft_resume.empty()) {
      st.step = load_checkpoint(ft_resume, st.model, &st.opt, st.data_rng);
    } else {
      load_params(ft_ckpt, st.model);
    }
    TrainUtil util(out, !ft_resume.empty());
    util.run(st, out, ft_ckpt_every, [&](TrainState& s) { return finetune_step(s, corpus); });
    std::cout << "checkpoint: " << (out / "checkpoint_final.ckpt").string() << '\n';
  });

  // ---- infer ----
  CommonOpts inf_c;
  std::string inf_ckpt, inf_context, inf_mode = "greedy";
  std::int64_t inf_topk = 8, inf_maxlen = 0;
  double inf_temp = 1.0;
  std::uint64_t inf_seed = 0;
  auto* inf = app.add_subcommand("infer", "Zero-resource response generation");
  add_common(inf, inf_c, "");
  inf->add_option("--ckpt", inf_ckpt, "Trained checkpoint")->required();
  inf->add_option("--context", inf_context, "Dialogue context text")->required();
  inf->add_option("--mode", inf_mode, "greedy | top_k")->capture_default_str();
  inf->add_option("--top-k", inf_topk, "Top-k width for sampling")->capture_default_str();
  inf->add_option("--temperature", inf_temp, "Sampling temperature")->capture_default_str();
  inf->add_option("--decode-seed", inf_seed, "Sampling seed")->capture_default_str();
  inf->add_option("--max-new", inf_maxlen, "Max generated tokens (0 = config value)")
      ->capture_default_str();
  inf->callback([&] {
    ModelConfig cfg = resolve_config_from(inf_ckpt, inf_c);
    print_config(cfg);
    VikdfModel model(cfg);
    load_params(inf_ckpt, model);
    DecodeOptions d = decode_options(cfg, inf_mode, inf_topk, inf_temp, inf_seed, inf_maxlen);
    std::string response = infer_response(model, inf_context, d);
    if (!inf_c.out_dir.empty()) write_text(prepare_out(inf_c.out_dir) / "response.txt", response);
    std::cout << "response: " << response << '\n';
  });

  // ---- textualize ----
  CommonOpts tx_c;
  std::string tx_ckpt, tx_context, tx_mode = "greedy";
  std::int64_t tx_topk = 8, tx_maxlen = 0;
  double tx_temp = 1.0;
  std::uint64_t tx_seed = 0;
  auto* tx = app.add_subcommand("textualize", "Describe the knowledge distilled from a context");
  add_common(tx, tx_c, "");
  tx->add_option("--ckpt", tx_ckpt, "Trained checkpoint")->required();
  tx->add_option("--context", tx_context, "Context text to distill")->required();
  tx->add_option("--mode", tx_mode, "greedy | top_k")->capture_default_str();
  tx->add_option("--top-k", tx_topk, "Top-k width for sampling")->capture_default_str();
  tx->add_option("--temperature", tx_temp, "Sampling temperature")->capture_default_str();
  tx->add_option("--decode-seed", tx_seed, "Sampling seed")->capture_default_str();
  tx->add_option("--max-new", tx_maxlen, "Max generated tokens (0 = config value)")
      ->capture_default_str();
  tx->callback([&] {
    ModelConfig cfg = resolve_config_from(tx_ckpt, tx_c);
    print_config(cfg);
    VikdfModel model(cfg);
    load_params(tx_ckpt, model);
    DecodeOptions d = decode_options(cfg, tx_mode, tx_topk, tx_temp, tx_seed, tx_maxlen);
    std::string text = textualize_knowledge(model, tx_context, d);
    if (!tx_c.out_dir.empty()) write_text(prepare_out(tx_c.out_dir) / "textualization.txt", text);
    std::cout << "textualization: " << text << '\n';
  });

  // ---- eval ----
  CommonOpts ev_c;
  std::string ev_ckpt, ev_dialogues, ev_mode = "greedy";
  std::int64_t ev_topk = 8, ev_maxlen = 0;
  double ev_temp = 1.0;
  std::uint64_t ev_seed = 0;
  bool ev_per_sample = false;
  auto* ev = app.add_subcommand("eval", "Automatic metrics over a dialogue corpus");
  add_common(ev, ev_c, "out");
  ev->add_option("--ckpt", ev_ckpt, "Trained checkpoint")->required();
  ev->add_option("--dialogues", ev_dialogues, "Dialogue corpus (.jsonl)")->required();
  ev->add_option("--mode", ev_mode, "greedy | top_k")->capture_default_str();
  ev->add_option("--top-k", ev_topk, "Top-k width for sampling")->capture_default_str();
  ev->add_option("--temperature", ev_temp, "Sampling temperature")->capture_default_str();
  ev->add_option("--decode-seed", ev_seed, "Sampling seed")->capture_default_str();
  ev->add_option("--max-new", ev_maxlen, "Max generated tokens (0 = config value)")
      ->capture_default_str();
  ev->add_flag("--per-sample", ev_per_sample, "Also write a per-sample CSV");
  ev->callback([&] {
    ModelConfig cfg = resolve_config_from(ev_ckpt, ev_c);
    print_config(cfg);
    fs::path out = prepare_out(ev_c.out_dir);
    VikdfModel model(cfg);
    load_params(ev_ckpt, model);
    std::vector<DialogueSample> corpus = load_dialogue_corpus(ev_dialogues);
    DecodeOptions d = decode_options(cfg, ev_mode, ev_topk, ev_temp, ev_seed, ev_maxlen);
    EvalReport rep = evaluate(model, corpus, d);
    std::string text = format_eval_report(rep);
    write_text(out / "eval_report.txt", text);
    std::cout << text;
    if (ev_per_sample) {
      std::ostringstream csv;
      csv << "index,rouge_l,emb_greedy,candidate\n";
      for (const auto& row : rep.per_sample)
        csv << row.index << ',' << fmt_double(row.rouge_l) << ',' << fmt_double(row.emb_greedy)
            << ',' << csv_escape(row.candidate) << '\n';
      write_text(out / "eval_samples.csv", csv.str());
    }
  });

  // ---- ablate ----
  CommonOpts ab_c;
  std::string ab_disable, ab_pairs, ab_images;
  std::int64_t ab_probe_count = 128;
  auto* ab = app.add_subcommand("ablate", "Pretrain with one objective disabled and report");
  add_common(ab, ab_c, "out");
  ab->add_option("--disable", ab_disable, "tim | tamim | iamtm | bvif")->required();
  ab->add_option("--pairs", ab_pairs, "Pair corpus records (.jsonl)");
  ab->add_option("--images", ab_images, "Pair corpus image sidecar");
  ab->add_option("--probe-count", ab_probe_count, "Probe corpus size per split")
      ->capture_default_str();
  ab->callback([&] {
    ModelConfig cfg = resolve_config(ab_c);
    if (ab_disable == "tim") cfg.disable_tim = true;
    else if (ab_disable == "tamim") cfg.disable_tamim = true;
    else if (ab_disable == "iamtm") cfg.disable_iamtm = true;
    else if (ab_disable == "bvif") cfg.disable_bvif = true;
    else throw UsageError("--disable must be one of tim, tamim, iamtm, bvif");
    cfg.validate();
    print_config(cfg);
    fs::path out = prepare_out(ab_c.out_dir);
    write_text(out / "config.txt", cfg.serialize());
    PairSet corpus = load_or_generate_pairs(ab_pairs, ab_images, cfg);
    TrainState st(cfg);
    TrainLogRecord last = last_pretrain_record(st, corpus, out, 0, false);
    ProbeData pd = probe_data(cfg, ab_probe_count);
    ProbeReport probe =
        attribute_probe(st.model, pd.train, pd.test, cfg.attribute_count, false, cfg.seed);
    double heldout = recon_error(st.model, pd.test, cfg.batch_size);
    std::ostringstream rep;
    rep << "disabled = " << ab_disable << '\n';
    if (last.kd) rep << "final_l_kd = " << fmt_double(*last.kd) << '\n';
    if (last.ki) rep << "final_l_ki = " << fmt_double(*last.ki) << '\n';
    rep << "probe_train_acc = " << fmt_double(probe.train_accuracy) << '\n';
    rep << "probe_test_acc = " << fmt_double(probe.test_accuracy) << '\n';
    rep << "heldout_recon_error = " << fmt_double(heldout) << '\n';
    write_text(out / "ablate_report.txt", rep.str());
    std::cout << rep.str();
  });

  // ---- sweep-queries ----
  CommonOpts sw_c;
  std::string sw_n = "2,4,8,16", sw_pairs, sw_images;
  std::int64_t sw_probe_count = 128;
  auto* sw = app.add_subcommand("sweep-queries", "Train once per query-bank size and report");
  add_common(sw, sw_c, "out");
  sw->add_option("--n", sw_n, "Comma-separated n_queries values")->capture_default_str();
  sw->add_option("--pairs", sw_pairs, "Pair corpus records (.jsonl)");
  sw->add_option("--images", sw_images, "Pair corpus image sidecar");
  sw->add_option("--probe-count", sw_probe_count, "Probe corpus size per split")
      ->capture_default_str();
  sw->callback([&] {
    std::vector<std::int64_t> ns;
    std::istringstream ss(sw_n);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) ns.push_back(std::stoll(item));
    if (ns.empty()) throw UsageError("--n lists no values");
    ModelConfig base = resolve_config(sw_c);
    print_config(base);
    fs::path out = prepare_out(sw_c.out_dir);
    std::ofstream report(out / "sweep_report.jsonl", std::ios::binary | std::ios::trunc);
    if (!report) throw IoError("cannot open sweep report under '" + out.string() + "'");
    for (std::int64_t n : ns) {
      ModelConfig cfg = base;
      cfg.n_queries = n;
      cfg.validate();
      PairSet corpus = load_or_generate_pairs(sw_pairs, sw_images, cfg);
      fs::path run_out = prepare_out((out / ("n" + std::to_string(n))).string());
      write_text(run_out / "config.txt", cfg.serialize());
      TrainState st(cfg);
      TrainLogRecord last = last_pretrain_record(st, corpus, run_out, 0, false);
      ProbeData pd = probe_data(cfg, sw_probe_count);
      ProbeReport probe =
          attribute_probe(st.model, pd.train, pd.test, cfg.attribute_count, false, cfg.seed);
      std::string row = "{\"n_queries\":" + std::to_string(n) +
                        ",\"final_l_kd\":" + fmt_double(last.kd ? *last.kd : 0.0) +
                        ",\"final_l_ki\":" + fmt_double(last.ki ? *last.ki : 0.0) +
                        ",\"probe_train_acc\":" + fmt_double(probe.train_accuracy) +
                        ",\"probe_test_acc\":" + fmt_double(probe.test_accuracy) + "}";
      report << row << '\n' << std::flush;
      std::cout << row << '\n';
    }
  });

  // ---- gen-data ----
  CommonOpts gd_c;
  std::uint64_t gd_seed = 1;
  std::int64_t gd_count = 256, gd_attributes = 4, gd_image_size = 32, gd_dialogues = 256;
  auto* gd = app.add_subcommand("gen-data", "Write a synthetic pair and dialogue corpus");
  add_common(gd, gd_c, "out");
  gd->add_option("--seed", gd_seed, "Generator seed")->capture_default_str();
  gd->add_option("--count", gd_count, "Number of image-text pairs")->capture_default_str();
  gd->add_option("--attributes", gd_attributes, "Latent attribute count")->capture_default_str();
  gd->add_option("--image-size", gd_image_size, "Image side length")->capture_default_str();
  gd->add_option("--dialogues", gd_dialogues, "Number of dialogue samples (0 = none)")
      ->capture_default_str();
  gd->callback([&] {
    std::cout << "# resolved config\nseed = " << gd_seed << "\ncount = " << gd_count
              << "\nattributes = " << gd_attributes << "\nimage_size = " << gd_image_size
              << "\ndialogues = " << gd_dialogues << '\n';
    fs::path out = prepare_out(gd_c.out_dir);
    PairSet pairs = generate_synthetic_pairs(gd_seed, gd_count, gd_attributes, gd_image_size);
    save_pairs(pairs, (out / "pairs.jsonl").string(), (out / "pairs.img").string());
    std::cout << "wrote " << (out / "pairs.jsonl").string() << " and "
              << (out / "pairs.img").string() << '\n';
    if (gd_dialogues > 0) {
      std::vector<LabeledDialogue> labeled =
          generate_synthetic_dialogues(gd_seed + 1, gd_dialogues, gd_attributes);
      std::vector<DialogueSample> plain;
      plain.reserve(labeled.size());
      for (const auto& l : labeled) plain.push_back(l.dialogue);
      save_dialogue_corpus(plain, (out / "dialogues.jsonl").string());
      std::cout << "wrote " << (out / "dialogues.jsonl").string() << '\n';
    }
  });

  // ---- grad-check ----
  std::uint64_t gc_seed = 1234;
  std::int64_t gc_configs = 5;
  double gc_tol = 1e-4;
  auto* gc = app.add_subcommand("grad-check", "Verify loss gradients against central differences");
  gc->add_option("--seed", gc_seed, "Base seed for toy configurations")->capture_default_str();
  gc->add_option("--configs", gc_configs, "Number of toy configurations")->capture_default_str();
  gc->add_option("--tol", gc_tol, "Relative error tolerance")->capture_default_str();
  gc->callback([&] {
    std::cout << "# resolved config\nseed = " << gc_seed << "\nconfigs = " << gc_configs
              << "\ntol = " << fmt_double(gc_tol) << '\n';
    std::vector<LossGradReport> reports =
        check_loss_gradients(gc_seed, static_cast<int>(gc_configs), gc_tol);
    bool all_pass = true;
    for (const auto& r : reports) {
      std::cout << r.loss << " seed=" << r.config_seed
                << " max_rel_err=" << fmt_double(r.result.max_rel_err) << " worst="
                << (r.result.worst_param.empty() ? "-" : r.result.worst_param) << ' '
                << (r.pass ? "PASS" : "FAIL") << '\n';
      all_pass = all_pass && r.pass;
    }
    if (!all_pass) throw NumericError("gradient check exceeded tolerance");
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    throw UsageError(e.what());
  }
  return 0;
}

std::string one_line(const char* msg) {
  std::string s(msg);
  for (auto& ch : s)
    if (ch == '\n') ch = ' ';
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_app(argc, argv);
  } catch (const UsageError& e) {
    std::cerr << "error[" << e.category() << "]: " << one_line(e.what()) << '\n';
    return 2;
  } catch (const Error& e) {
    std::cerr << "error[" << e.category() << "]: " << one_line(e.what()) << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error[internal]: " << one_line(e.what()) << '\n';
    return 1;
  }
}
