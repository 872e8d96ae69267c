#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "odg/detector.hpp"
#include "odg/svg.hpp"

namespace odg {

// ---------------------------------------------------------------------------
// run configuration

struct OptimizerConfig {
  double lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int epochs = 20;
  int decay_epoch = 15;  // lr divided by 10 from this epoch on
  int batch_size = 4;
};

struct DataConfig {
  int train_per_domain = 200;
  int test_per_domain = 50;
  int objects_min = 1;
  int objects_max = 4;
};

struct BankConfig {
  std::string source = "synthetic";  // synthetic | encoder | file
  int entries = 64;
  std::string path;          // for source = file
  std::string image_source;  // dataset dir for source = encoder; defaults to the train set
};

struct RunConfig {
  std::uint64_t seed = 42;
  DetectorConfig detector;
  OptimizerConfig optimizer;
  DataConfig data;
  BankConfig bank;
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, const std::vector<std::string>& known,
                                const std::string& section) {
  for (const auto& [key, value] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw ConfigError("unknown config key '" + key + "' in " + section);
  }
}

template <typename T>
void maybe(const nlohmann::json& j, const char* key, T& slot) {
  if (j.contains(key)) slot = j.at(key).get<T>();
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig cfg;
  detail::reject_unknown_keys(j, {"seed", "detector", "optimizer", "data", "bank"}, "config root");
  detail::maybe(j, "seed", cfg.seed);
  if (j.contains("detector")) {
    const auto& d = j.at("detector");
    detail::reject_unknown_keys(
        d,
        {"image_size", "channels", "pyramid_channels", "pooled_size", "embed_dim", "proj_hidden",
         "num_classes", "proposals", "tau", "anchor_scales", "score_threshold", "nms_iou",
         "smooth_l1_beta", "style", "hcl", "rac", "sec", "style_blocks", "sec_metric"},
        "detector");
    DetectorConfig& dc = cfg.detector;
    detail::maybe(d, "image_size", dc.image_size);
    detail::maybe(d, "channels", dc.channels);
    detail::maybe(d, "pyramid_channels", dc.pyramid_channels);
    detail::maybe(d, "pooled_size", dc.pooled_size);
    detail::maybe(d, "embed_dim", dc.embed_dim);
    detail::maybe(d, "proj_hidden", dc.proj_hidden);
    detail::maybe(d, "num_classes", dc.num_classes);
    detail::maybe(d, "proposals", dc.proposals);
    detail::maybe(d, "tau", dc.tau);
    detail::maybe(d, "anchor_scales", dc.anchor_scales);
    detail::maybe(d, "score_threshold", dc.score_threshold);
    detail::maybe(d, "nms_iou", dc.nms_iou);
    detail::maybe(d, "smooth_l1_beta", dc.smooth_l1_beta);
    detail::maybe(d, "style", dc.style);
    detail::maybe(d, "hcl", dc.hcl);
    detail::maybe(d, "rac", dc.rac);
    detail::maybe(d, "sec", dc.sec);
    if (d.contains("style_blocks")) {
      dc.style_blocks = {false, false, false, false};
      for (int b : d.at("style_blocks").get<std::vector<int>>()) {
        if (b < 1 || b > 4) throw ConfigError("style_blocks entries must be in 1..4");
        dc.style_blocks[static_cast<std::size_t>(b - 1)] = true;
      }
    }
    if (d.contains("sec_metric")) dc.sec_metric = parse_sec_metric(d.at("sec_metric").get<std::string>());
  }
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    detail::reject_unknown_keys(
        o, {"lr", "momentum", "weight_decay", "epochs", "decay_epoch", "batch_size"}, "optimizer");
    detail::maybe(o, "lr", cfg.optimizer.lr);
    detail::maybe(o, "momentum", cfg.optimizer.momentum);
    detail::maybe(o, "weight_decay", cfg.optimizer.weight_decay);
    detail::maybe(o, "epochs", cfg.optimizer.epochs);
    detail::maybe(o, "decay_epoch", cfg.optimizer.decay_epoch);
    detail::maybe(o, "batch_size", cfg.optimizer.batch_size);
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    detail::reject_unknown_keys(
        d, {"train_per_domain", "test_per_domain", "objects_min", "objects_max"}, "data");
    detail::maybe(d, "train_per_domain", cfg.data.train_per_domain);
    detail::maybe(d, "test_per_domain", cfg.data.test_per_domain);
    detail::maybe(d, "objects_min", cfg.data.objects_min);
    detail::maybe(d, "objects_max", cfg.data.objects_max);
  }
  if (j.contains("bank")) {
    const auto& b = j.at("bank");
    detail::reject_unknown_keys(b, {"source", "entries", "path", "image_source"}, "bank");
    detail::maybe(b, "source", cfg.bank.source);
    detail::maybe(b, "entries", cfg.bank.entries);
    detail::maybe(b, "path", cfg.bank.path);
    detail::maybe(b, "image_source", cfg.bank.image_source);
    if (cfg.bank.source != "synthetic" && cfg.bank.source != "encoder" && cfg.bank.source != "file")
      throw ConfigError("bank.source must be synthetic|encoder|file");
  }
  cfg.detector.validate();
  return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }
  return parse_run_config(j);
}

inline nlohmann::json run_config_to_json(const RunConfig& cfg) {
  std::vector<int> style_blocks;
  for (int b = 0; b < 4; ++b)
    if (cfg.detector.style_blocks[static_cast<std::size_t>(b)]) style_blocks.push_back(b + 1);
  return nlohmann::json{
      {"seed", cfg.seed},
      {"detector",
       {{"image_size", cfg.detector.image_size},
        {"channels", cfg.detector.channels},
        {"pyramid_channels", cfg.detector.pyramid_channels},
        {"pooled_size", cfg.detector.pooled_size},
        {"embed_dim", cfg.detector.embed_dim},
        {"proj_hidden", cfg.detector.proj_hidden},
        {"num_classes", cfg.detector.num_classes},
        {"proposals", cfg.detector.proposals},
        {"tau", cfg.detector.tau},
        {"anchor_scales", cfg.detector.anchor_scales},
        {"score_threshold", cfg.detector.score_threshold},
        {"nms_iou", cfg.detector.nms_iou},
        {"smooth_l1_beta", cfg.detector.smooth_l1_beta},
        {"style", cfg.detector.style},
        {"hcl", cfg.detector.hcl},
        {"rac", cfg.detector.rac},
        {"sec", cfg.detector.sec},
        {"style_blocks", style_blocks},
        {"sec_metric", sec_metric_name(cfg.detector.sec_metric)}}},
      {"optimizer",
       {{"lr", cfg.optimizer.lr},
        {"momentum", cfg.optimizer.momentum},
        {"weight_decay", cfg.optimizer.weight_decay},
        {"epochs", cfg.optimizer.epochs},
        {"decay_epoch", cfg.optimizer.decay_epoch},
        {"batch_size", cfg.optimizer.batch_size}}},
      {"data",
       {{"train_per_domain", cfg.data.train_per_domain},
        {"test_per_domain", cfg.data.test_per_domain},
        {"objects_min", cfg.data.objects_min},
        {"objects_max", cfg.data.objects_max}}},
      {"bank",
       {{"source", cfg.bank.source},
        {"entries", cfg.bank.entries},
        {"path", cfg.bank.path},
        {"image_source", cfg.bank.image_source}}}};
}

// ---------------------------------------------------------------------------
// checkpoints: JSON header + one little-endian float64 blob

constexpr int kCheckpointVersion = 1;

inline void save_checkpoint(const std::filesystem::path& dir, const Detector& det,
                            const RunConfig& cfg, int step, const Rng& train_rng) {
  std::filesystem::create_directories(dir);
  nlohmann::json header;
  header["version"] = kCheckpointVersion;
  header["config"] = run_config_to_json(cfg);
  header["step"] = step;
  header["rng_state"] = train_rng.serialize();
  header["blob_file"] = "checkpoint.f64";
  header["tensors"] = nlohmann::json::array();
  std::vector<double> blob;
  ParamStore& params = const_cast<ParamStore&>(det.params);
  for (const std::string& name : params.names()) {
    const Tensor& t = params.value(name);
    header["tensors"].push_back(
        {{"name", name}, {"shape", t.shape}, {"offset", blob.size()}, {"count", t.data.size()}});
    blob.insert(blob.end(), t.data.begin(), t.data.end());
  }
  header["blob_crc32"] = blob_crc32(blob);
  write_f64_blob(dir / "checkpoint.f64", blob);
  std::ofstream out(dir / "checkpoint.json");
  if (!out) throw IoError("cannot write checkpoint header in " + dir.string());
  out << header.dump(2) << "\n";
}

struct LoadedCheckpoint {
  RunConfig config;
  Detector detector;
  int step = 0;
  Rng train_rng;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "checkpoint.json");
  if (!in) throw IoError("cannot read checkpoint: " + (dir / "checkpoint.json").string());
  nlohmann::json header;
  try {
    in >> header;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed checkpoint header: " + std::string(e.what()));
  }
  if (header.at("version").get<int>() != kCheckpointVersion)
    throw IoError("unsupported checkpoint version");
  LoadedCheckpoint out;
  out.config = parse_run_config(header.at("config"));
  out.step = header.at("step").get<int>();
  out.train_rng = Rng::deserialize(header.at("rng_state").get<std::string>());
  out.detector.cfg = out.config.detector;
  out.detector.init(out.config.seed);
  std::size_t total = 0;
  for (const auto& jt : header.at("tensors")) total += jt.at("count").get<std::size_t>();
  const std::vector<double> blob = read_f64_blob(dir / header.at("blob_file").get<std::string>(), total);
  if (blob_crc32(blob) != header.at("blob_crc32").get<std::uint32_t>())
    throw IoError("checkpoint blob checksum mismatch");
  for (const auto& jt : header.at("tensors")) {
    const std::string name = jt.at("name").get<std::string>();
    Tensor& t = out.detector.params.value(name);
    if (t.shape != jt.at("shape").get<std::vector<int>>())
      throw IoError("checkpoint tensor shape mismatch for " + name);
    const std::size_t offset = jt.at("offset").get<std::size_t>();
    std::copy(blob.begin() + static_cast<std::ptrdiff_t>(offset),
              blob.begin() + static_cast<std::ptrdiff_t>(offset + t.data.size()), t.data.begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// dataset generation command

/// Generate train/test splits for the three builtin domains. The photometric
/// style is the only thing that differs across domains; scene geometry is
/// drawn independently per (domain, split, index) seed.
inline void cmd_gen(const RunConfig& cfg, const std::filesystem::path& out_dir,
                    std::ostream& log = std::cout) {
  SceneSpec spec;
  spec.image_size = cfg.detector.image_size;
  spec.min_objects = cfg.data.objects_min;
  spec.max_objects = cfg.data.objects_max;
  const std::array<DomainStyle, 3> styles = {domain_style_a(), domain_style_b(), domain_style_c()};
  for (std::size_t d = 0; d < styles.size(); ++d) {
    for (const std::string split : {"train", "test"}) {
      const int count = split == "train" ? cfg.data.train_per_domain : cfg.data.test_per_domain;
      std::vector<Sample> samples;
      samples.reserve(static_cast<std::size_t>(count));
      int objects = 0;
      for (int i = 0; i < count; ++i) {
        const std::uint64_t stream = (d * 2 + (split == "test" ? 1 : 0)) * 1000003ull;
        Rng rng(derive_seed(cfg.seed, 10 + stream, static_cast<std::uint64_t>(i)));
        Sample s = generate_scene(spec, rng);
        s = apply_domain_style(s, styles[d], rng);
        objects += static_cast<int>(s.boxes.size());
        samples.push_back(std::move(s));
      }
      write_dataset(samples, out_dir / styles[d].name / split, spec.image_size,
                    SceneSpec::class_names());
      log << "domain " << styles[d].name << " " << split << ": " << count << " images, " << objects
          << " objects\n";
    }
  }
}

// ---------------------------------------------------------------------------
// training command

inline StyleBank build_bank(const RunConfig& cfg, const std::filesystem::path& train_dir) {
  if (cfg.bank.source == "file") {
    if (cfg.bank.path.empty()) throw ConfigError("bank.source=file requires bank.path");
    return load_style_bank(cfg.bank.path);
  }
  if (cfg.bank.source == "encoder") {
    ParamStore encoder;
    Rng enc_rng(derive_seed(cfg.seed, 2));
    init_backbone(encoder, "enc", 3, cfg.detector.channels, enc_rng);
    const std::filesystem::path source =
        cfg.bank.image_source.empty() ? train_dir : std::filesystem::path(cfg.bank.image_source);
    const std::vector<Sample> images = read_dataset(source);
    if (images.empty()) throw InvalidInput("encoder bank: image source dataset is empty");
    StyleBank bank;
    const int count = std::min<int>(cfg.bank.entries, static_cast<int>(images.size()));
    for (int i = 0; i < count; ++i) {
      StyleEntry entry;
      entry.id = "encoded-" + std::to_string(i);
      entry.blocks = encode_style_image(images[static_cast<std::size_t>(i)].image, encoder);
      bank.entries.push_back(std::move(entry));
    }
    return bank;
  }
  Rng bank_rng(derive_seed(cfg.seed, 3));
  return build_synthetic_bank(cfg.detector.channels, cfg.bank.entries, bank_rng);
}

/// Resolve a dataset argument: either a manifest directory itself or the
/// conventional layout root (uses <data>/A/train).
inline std::filesystem::path resolve_train_dir(const std::filesystem::path& data) {
  if (std::filesystem::exists(data / "manifest.json")) return data;
  return data / "A" / "train";
}

struct TrainResult {
  int steps = 0;
  StepLosses last;
};

/// Full training loop: per-epoch shuffles, lr decayed by 10 at decay_epoch,
/// per-step loss CSV, checkpoint at the end. Only the source-domain data is
/// ever read.
inline TrainResult cmd_train(const RunConfig& cfg, const std::filesystem::path& data,
                             const std::filesystem::path& out_dir, std::ostream& log = std::cout) {
  const std::filesystem::path train_dir = resolve_train_dir(data);
  if (!std::filesystem::exists(train_dir / "manifest.json"))
    throw IoError("training data not found at " + train_dir.string());
  const std::vector<Sample> train_set = read_dataset(train_dir);
  if (train_set.empty()) throw InvalidInput("training set is empty");

  std::filesystem::create_directories(out_dir);
  Detector det;
  det.cfg = cfg.detector;
  det.init(cfg.seed);

  StyleBank bank;
  if (cfg.detector.style) {
    bank = build_bank(cfg, train_dir);
    save_style_bank(bank, out_dir / "style_bank");
  }

  SgdOptimizer opt(cfg.optimizer.lr, cfg.optimizer.momentum, cfg.optimizer.weight_decay);
  Rng train_rng(derive_seed(cfg.seed, 4));

  std::ofstream csv(out_dir / "loss.csv");
  if (!csv) throw IoError("cannot write loss.csv in " + out_dir.string());
  csv << "step,L_cls,L_reg,L_HCL,L_RAC,L_SEC,total\n";
  csv.precision(17);

  TrainResult result;
  int step = 0;
  for (int epoch = 0; epoch < cfg.optimizer.epochs; ++epoch) {
    opt.set_lr(epoch >= cfg.optimizer.decay_epoch ? cfg.optimizer.lr * 0.1 : cfg.optimizer.lr);
    std::vector<int> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    train_rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.optimizer.batch_size)) {
      std::vector<const Sample*> batch;
      for (std::size_t i = start;
           i < std::min(order.size(), start + static_cast<std::size_t>(cfg.optimizer.batch_size)); ++i)
        batch.push_back(&train_set[static_cast<std::size_t>(order[i])]);
      StepLosses losses;
      try {
        losses = train_step(det, batch, cfg.detector.style ? &bank : nullptr, train_rng, opt);
      } catch (const NumericError& e) {
        throw NumericError("training aborted at step " + std::to_string(step) + ": " + e.what());
      }
      csv << step << "," << losses.cls << "," << losses.reg << "," << losses.hcl << ","
          << losses.rac << "," << losses.sec << "," << losses.total << "\n";
      result.last = losses;
      ++step;
    }
    log << "epoch " << epoch + 1 << "/" << cfg.optimizer.epochs << " total " << result.last.total
        << "\n";
  }
  result.steps = step;
  save_checkpoint(out_dir, det, cfg, step, train_rng);
  return result;
}

// ---------------------------------------------------------------------------
// evaluation command

inline std::vector<Detection> detect_dataset(Detector& det, const std::vector<Sample>& samples,
                                             int jobs = 2) {
  std::vector<std::vector<Detection>> per_image(samples.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= samples.size()) return;
      per_image[i] = detect_image(det, samples[i].image, static_cast<int>(i));
    }
  };
  std::vector<std::thread> threads;
  for (int t = 0; t < std::max(1, jobs) - 1; ++t) threads.emplace_back(worker);
  worker();
  for (std::thread& t : threads) t.join();
  std::vector<Detection> all;
  for (const auto& dets : per_image) all.insert(all.end(), dets.begin(), dets.end());
  return all;
}

inline std::vector<GtBox> dataset_ground_truth(const std::vector<Sample>& samples) {
  std::vector<GtBox> gts;
  for (std::size_t i = 0; i < samples.size(); ++i)
    for (const Annotation& a : samples[i].boxes)
      gts.push_back(GtBox{static_cast<int>(i), a.box, a.class_id});
  return gts;
}

/// Evaluate a checkpoint on one dataset directory. Inference never touches
/// the style bank.
inline EvalReport cmd_eval(const std::filesystem::path& checkpoint_dir,
                           const std::filesystem::path& data_dir, double iou_thr,
                           const std::filesystem::path& out_dir, std::ostream& log = std::cout,
                           int jobs = 2) {
  LoadedCheckpoint ckpt = load_checkpoint(checkpoint_dir);
  const std::vector<Sample> samples = read_dataset(data_dir);
  const std::vector<Detection> dets = detect_dataset(ckpt.detector, samples, jobs);
  const EvalReport report =
      evaluate_detections(dets, dataset_ground_truth(samples), iou_thr, ckpt.config.detector.num_classes);
  log << "mAP@" << iou_thr << " = " << report.map;
  if (report.angle_rmsd) log << ", angle RMSD = " << *report.angle_rmsd << " rad";
  log << " (" << samples.size() << " images)\n";
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    write_eval_report(report, out_dir / "report.json", SceneSpec::class_names());
    std::ofstream csv(out_dir / "report.csv");
    csv.precision(17);
    csv << "tag,mAP,angle_rmsd";
    for (const std::string& name : SceneSpec::class_names()) csv << ",ap_" << name;
    csv << "\n" << report.to_csv_row(data_dir.string()) << "\n";
  }
  return report;
}

// ---------------------------------------------------------------------------
// ablation matrices

struct AblationCell {
  std::string matrix;
  std::string row;
  int seed_index = 0;
  RunConfig config;
};

struct AblationOutcome {
  std::string domain;
  double map = 0.0;
  std::optional<double> rmsd;
};

inline std::vector<AblationCell> build_ablation_matrix(const RunConfig& base, int seeds) {
  std::vector<AblationCell> cells;
  auto push = [&](const std::string& matrix, const std::string& row, auto mutate) {
    for (int s = 0; s < seeds; ++s) {
      AblationCell cell{matrix, row, s, base};
      cell.config.seed = base.seed + static_cast<std::uint64_t>(s);
      mutate(cell.config.detector);
      cells.push_back(std::move(cell));
    }
  };
  // component matrix: cumulative toggles
  push("component", "baseline", [](DetectorConfig& d) { d.style = d.hcl = d.rac = d.sec = false; });
  push("component", "style", [](DetectorConfig& d) { d.style = true; d.hcl = d.rac = d.sec = false; });
  push("component", "style+hcl", [](DetectorConfig& d) { d.style = d.hcl = true; d.rac = d.sec = false; });
  push("component", "style+hcl+rac", [](DetectorConfig& d) { d.style = d.hcl = d.rac = true; d.sec = false; });
  push("component", "full", [](DetectorConfig& d) { d.style = d.hcl = d.rac = d.sec = true; });
  // per-scale style matrix: hallucinate a prefix of the blocks
  for (int upto = 1; upto <= 4; ++upto) {
    std::string row = "blocks1-" + std::to_string(upto);
    push("scale", row, [upto](DetectorConfig& d) {
      d.style = d.hcl = d.rac = d.sec = true;
      for (int b = 0; b < 4; ++b) d.style_blocks[static_cast<std::size_t>(b)] = b < upto;
    });
  }
  // distance-metric matrix
  for (SecMetric m : {SecMetric::L2, SecMetric::Kl, SecMetric::Jsd}) {
    push("metric", sec_metric_name(m), [m](DetectorConfig& d) {
      d.style = d.hcl = d.rac = d.sec = true;
      d.sec_metric = m;
    });
  }
  return cells;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw InvalidInput("median of empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Train one cell and evaluate it on every domain's test split.
inline std::vector<AblationOutcome> run_ablation_cell(const AblationCell& cell,
                                                      const std::filesystem::path& data,
                                                      const std::filesystem::path& cell_dir) {
  std::ostringstream sink;
  cmd_train(cell.config, data, cell_dir, sink);
  std::vector<AblationOutcome> out;
  for (const std::string domain : {"A", "B", "C"}) {
    const std::filesystem::path test_dir = data / domain / "test";
    if (!std::filesystem::exists(test_dir / "manifest.json")) continue;
    const EvalReport report = cmd_eval(cell_dir, test_dir, 0.5, "", sink, 1);
    out.push_back(AblationOutcome{domain, report.map, report.angle_rmsd});
  }
  return out;
}

/// Run the component/scale/metric matrices over several seeds, write the raw
/// cell CSV and per-row medians. Cells run in parallel worker threads; each
/// cell is fully deterministic in isolation.
inline void cmd_ablate(const RunConfig& base, const std::filesystem::path& data,
                       const std::filesystem::path& out_dir, int seeds, int jobs,
                       const std::string& matrix_filter = "all", std::ostream& log = std::cout) {
  std::vector<AblationCell> cells;
  for (AblationCell& c : build_ablation_matrix(base, seeds))
    if (matrix_filter == "all" || c.matrix == matrix_filter) cells.push_back(std::move(c));
  if (cells.empty()) throw ConfigError("no ablation cells match matrix filter: " + matrix_filter);
  std::filesystem::create_directories(out_dir);

  std::vector<std::vector<AblationOutcome>> results(cells.size());
  std::atomic<std::size_t> next{0};
  std::atomic<int> failures{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      const AblationCell& cell = cells[i];
      const std::filesystem::path cell_dir =
          out_dir / ("cell_" + cell.matrix + "_" + cell.row + "_s" + std::to_string(cell.seed_index));
      try {
        results[i] = run_ablation_cell(cell, data, cell_dir);
      } catch (const std::exception& e) {
        ++failures;
        log_warn("ablation cell " + cell.matrix + "/" + cell.row + " seed " +
                 std::to_string(cell.seed_index) + " failed: " + e.what());
      }
    }
  };
  std::vector<std::thread> threads;
  for (int t = 0; t < std::max(1, jobs) - 1; ++t) threads.emplace_back(worker);
  worker();
  for (std::thread& t : threads) t.join();
  if (failures.load() > 0) throw Error("ablation: " + std::to_string(failures.load()) + " cells failed");

  std::ofstream csv(out_dir / "cells.csv");
  if (!csv) throw IoError("cannot write cells.csv");
  csv.precision(17);
  csv << "matrix,row,seed,domain,mAP,RMSD\n";
  for (std::size_t i = 0; i < cells.size(); ++i)
    for (const AblationOutcome& o : results[i]) {
      csv << cells[i].matrix << "," << cells[i].row << "," << cells[i].seed_index << "," << o.domain
          << "," << o.map << ",";
      if (o.rmsd) csv << *o.rmsd;
      csv << "\n";
    }

  // medians per (matrix, row, domain), in first-seen row order
  std::vector<std::tuple<std::string, std::string, std::string>> keys;
  auto values_for = [&](const auto& key, bool rmsd) {
    std::vector<double> vals;
    for (std::size_t i = 0; i < cells.size(); ++i)
      for (const AblationOutcome& o : results[i])
        if (cells[i].matrix == std::get<0>(key) && cells[i].row == std::get<1>(key) &&
            o.domain == std::get<2>(key)) {
          if (!rmsd)
            vals.push_back(o.map);
          else if (o.rmsd)
            vals.push_back(*o.rmsd);
        }
    return vals;
  };
  for (std::size_t i = 0; i < cells.size(); ++i)
    for (const AblationOutcome& o : results[i]) {
      auto key = std::make_tuple(cells[i].matrix, cells[i].row, o.domain);
      if (std::find(keys.begin(), keys.end(), key) == keys.end()) keys.push_back(key);
    }
  std::ofstream med(out_dir / "medians.csv");
  med.precision(17);
  med << "matrix,row,domain,median_mAP,median_RMSD\n";
  for (const auto& key : keys) {
    const std::vector<double> maps = values_for(key, false);
    const std::vector<double> rmsds = values_for(key, true);
    med << std::get<0>(key) << "," << std::get<1>(key) << "," << std::get<2>(key) << ","
        << median(maps) << ",";
    if (!rmsds.empty()) med << median(rmsds);
    med << "\n";
    log << std::get<0>(key) << "/" << std::get<1>(key) << " on " << std::get<2>(key)
        << ": median mAP " << median(maps) << "\n";
  }
}

// ---------------------------------------------------------------------------
// plots

namespace detail {

inline std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path,
                                                      std::string& header) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read CSV: " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line_no == 1) {
      header = line;
      continue;
    }
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (line.back() == ',') fields.push_back("");
    rows.push_back(std::move(fields));
  }
  return rows;
}

inline double parse_double_field(const std::string& s, const std::filesystem::path& path, int row) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("malformed CSV row " + std::to_string(row + 2) + " in " + path.string() +
                      ": bad number '" + s + "'");
  }
}

}  // namespace detail

/// Loss CSVs become line charts, ablation cell CSVs become median bar charts.
/// An empty CSV still produces a valid (empty) chart.
inline void cmd_plot(const std::filesystem::path& csv_path, const std::filesystem::path& out_dir,
                     std::ostream& log = std::cout) {
  std::string header;
  const std::vector<std::vector<std::string>> rows = detail::read_csv(csv_path, header);
  std::filesystem::create_directories(out_dir);
  if (header.rfind("step,", 0) == 0) {
    SvgChart chart(860, 520, "training loss");
    const std::vector<std::string> names = {"L_cls", "L_reg", "L_HCL", "L_RAC", "L_SEC", "total"};
    for (std::size_t c = 0; c < names.size(); ++c) {
      SvgChart::Series s;
      s.name = names[c];
      for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != 7)
          throw ConfigError("malformed CSV row " + std::to_string(r + 2) + " in " + csv_path.string());
        s.points.emplace_back(detail::parse_double_field(rows[r][0], csv_path, static_cast<int>(r)),
                              detail::parse_double_field(rows[r][c + 1], csv_path, static_cast<int>(r)));
      }
      chart.add_series(std::move(s));
    }
    chart.write(out_dir / "loss_curves.svg");
    log << "wrote " << (out_dir / "loss_curves.svg").string() << "\n";
    return;
  }
  if (header.rfind("matrix,", 0) == 0) {
    // median target mAP per row (domains other than the source A)
    std::vector<std::string> row_order;
    std::map<std::string, std::vector<double>> vals;
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r].size() != 6)
        throw ConfigError("malformed CSV row " + std::to_string(r + 2) + " in " + csv_path.string());
      const std::string key = rows[r][0] + "/" + rows[r][1];
      if (rows[r][3] == "A") continue;
      if (!vals.count(key)) row_order.push_back(key);
      vals[key].push_back(detail::parse_double_field(rows[r][4], csv_path, static_cast<int>(r)));
    }
    SvgChart chart(860, 520, "median target mAP by configuration");
    for (const std::string& key : row_order) chart.add_bar({key, median(vals[key])});
    chart.write(out_dir / "ablation_map.svg");
    log << "wrote " << (out_dir / "ablation_map.svg").string() << "\n";
    return;
  }
  // unknown or empty header: still emit a valid empty chart
  SvgChart chart(860, 520, "no data");
  chart.write(out_dir / "chart.svg");
  log << "wrote " << (out_dir / "chart.svg").string() << "\n";
}

}  // namespace odg
