#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "odg/net.hpp"
#include "odg/rng.hpp"

namespace odg {

/// Epsilon inside the std square root. Keeps constant feature maps usable as
/// normalization denominators.
constexpr double kStatsEps = 1e-5;

/// Per-channel style statistics of one feature map: spatial mean and
/// sqrt(variance + eps).
struct ChannelStats {
  std::vector<double> mu;
  std::vector<double> sigma;

  int channels() const { return static_cast<int>(mu.size()); }
};

/// Plain (non-differentiable) statistics of a (C,H,W) map.
inline ChannelStats channel_stats(const Tensor& f, double eps = kStatsEps) {
  if (f.shape.size() != 3) throw ShapeError("channel_stats: expected (C,H,W)");
  const int c = f.shape[0];
  const int hw = f.shape[1] * f.shape[2];
  ChannelStats s;
  s.mu.resize(static_cast<std::size_t>(c));
  s.sigma.resize(static_cast<std::size_t>(c));
  for (int ch = 0; ch < c; ++ch) {
    const double* p = &f.data[static_cast<std::size_t>(ch) * hw];
    double m = 0.0;
    for (int i = 0; i < hw; ++i) m += p[i];
    m /= hw;
    double q = 0.0;
    for (int i = 0; i < hw; ++i) q += (p[i] - m) * (p[i] - m);
    s.mu[static_cast<std::size_t>(ch)] = m;
    s.sigma[static_cast<std::size_t>(ch)] = std::sqrt(q / hw + eps);
  }
  return s;
}

/// Statistic transfer: renormalize each channel of `content` to the style's
/// (mu, sigma). A per-channel affine map, so it moves no spatial structure.
/// Differentiable with respect to the content features.
inline Var adain_transfer(Var content, const ChannelStats& style, double eps = kStatsEps) {
  const Tensor& x = content.val();
  if (x.shape.size() != 3) throw ShapeError("adain_transfer: expected (C,H,W)");
  if (x.shape[0] != style.channels())
    throw ShapeError("adain_transfer: content has " + std::to_string(x.shape[0]) +
                     " channels, style has " + std::to_string(style.channels()));
  Tape& t = *content.tape;
  Var mu = channel_mean(content);
  Var sigma = channel_std(content, eps);
  Var mu_s = t.constant(Tensor({style.channels()}, style.mu));
  Var sigma_s = t.constant(Tensor({style.channels()}, style.sigma));
  Var normalized = channel_div(channel_sub(content, mu), sigma);
  return channel_add(channel_mul(normalized, sigma_s), mu_s);
}

/// Plain-tensor convenience wrapper around the Var implementation.
inline Tensor adain_transfer(const Tensor& content, const ChannelStats& style, double eps = kStatsEps) {
  Tape tape;
  return adain_transfer(tape.constant(content), style, eps).val();
}

// ---------------------------------------------------------------------------
// style bank

/// One sampled style: statistics for all four backbone blocks. A single entry
/// is applied coherently to every block of one image.
struct StyleEntry {
  std::string id;
  std::array<ChannelStats, 4> blocks;
};

struct StyleBank {
  std::vector<StyleEntry> entries;

  bool empty() const { return entries.empty(); }
  std::size_t size() const { return entries.size(); }
};

inline const StyleEntry& sample_style(const StyleBank& bank, Rng& rng) {
  if (bank.empty()) throw InvalidInput("sample_style: empty style bank");
  return bank.entries[static_cast<std::size_t>(rng.uniform_index(bank.entries.size()))];
}

/// Synthetic style source: per channel mu* ~ Normal(0,1),
/// sigma* ~ LogNormal(0, 0.5).
inline StyleBank build_synthetic_bank(const std::vector<int>& block_channels, int count, Rng& rng) {
  if (block_channels.size() != 4) throw ConfigError("style bank expects 4 block channel counts");
  StyleBank bank;
  bank.entries.reserve(static_cast<std::size_t>(count));
  for (int e = 0; e < count; ++e) {
    StyleEntry entry;
    entry.id = "synthetic-" + std::to_string(e);
    for (int b = 0; b < 4; ++b) {
      const int c = block_channels[static_cast<std::size_t>(b)];
      ChannelStats s;
      s.mu.resize(static_cast<std::size_t>(c));
      s.sigma.resize(static_cast<std::size_t>(c));
      for (int ch = 0; ch < c; ++ch) {
        s.mu[static_cast<std::size_t>(ch)] = rng.normal(0.0, 1.0);
        s.sigma[static_cast<std::size_t>(ch)] = rng.lognormal(0.0, 0.5);
      }
      entry.blocks[static_cast<std::size_t>(b)] = std::move(s);
    }
    bank.entries.push_back(std::move(entry));
  }
  return bank;
}

/// Run an image through a frozen encoder (same architecture as the detector
/// backbone, weights fixed at initialization) and collect per-block stats.
inline std::array<ChannelStats, 4> encode_style_image(const Tensor& image, ParamStore& frozen_encoder,
                                                      double eps = kStatsEps) {
  if (image.shape.size() != 3) throw ShapeError("encode_style_image: expected (C,H,W) image");
  Tape tape;
  const std::array<Var, 4> blocks = backbone_forward(tape, frozen_encoder, "enc", tape.constant(image));
  std::array<ChannelStats, 4> out;
  for (int b = 0; b < 4; ++b) out[static_cast<std::size_t>(b)] = channel_stats(blocks[static_cast<std::size_t>(b)].val(), eps);
  return out;
}

// ---------------------------------------------------------------------------
// bank serialization: JSON manifest + raw little-endian float64 side files

inline void save_style_bank(const StyleBank& bank, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["entries"] = nlohmann::json::array();
  for (std::size_t e = 0; e < bank.entries.size(); ++e) {
    const StyleEntry& entry = bank.entries[e];
    nlohmann::json je;
    je["id"] = entry.id;
    je["blocks"] = nlohmann::json::array();
    for (int b = 0; b < 4; ++b) {
      const ChannelStats& s = entry.blocks[static_cast<std::size_t>(b)];
      const std::string stem = "entry" + std::to_string(e) + "_block" + std::to_string(b);
      write_f64_blob(dir / (stem + "_mu.f64"), s.mu);
      write_f64_blob(dir / (stem + "_sigma.f64"), s.sigma);
      je["blocks"].push_back({{"channels", s.channels()},
                              {"mu_file", stem + "_mu.f64"},
                              {"sigma_file", stem + "_sigma.f64"}});
    }
    manifest["entries"].push_back(std::move(je));
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write style bank manifest in " + dir.string());
  out << manifest.dump(2) << "\n";
}

inline StyleBank load_style_bank(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("cannot read style bank manifest in " + dir.string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed style bank manifest: " + std::string(e.what()));
  }
  StyleBank bank;
  for (const auto& je : manifest.at("entries")) {
    StyleEntry entry;
    entry.id = je.at("id").get<std::string>();
    const auto& blocks = je.at("blocks");
    if (blocks.size() != 4) throw IoError("style bank entry must cover 4 blocks");
    for (int b = 0; b < 4; ++b) {
      const auto& jb = blocks[static_cast<std::size_t>(b)];
      const int channels = jb.at("channels").get<int>();
      ChannelStats s;
      s.mu = read_f64_blob(dir / jb.at("mu_file").get<std::string>(), static_cast<std::size_t>(channels));
      s.sigma = read_f64_blob(dir / jb.at("sigma_file").get<std::string>(), static_cast<std::size_t>(channels));
      entry.blocks[static_cast<std::size_t>(b)] = std::move(s);
    }
    bank.entries.push_back(std::move(entry));
  }
  return bank;
}

}  // namespace odg
