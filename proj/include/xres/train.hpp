#pragma once

// Dataset directories, checkpoints, the training loop, tiled prediction and
// evaluation.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "xres/anlc.hpp"
#include "xres/config.hpp"
#include "xres/dataset.hpp"
#include "xres/metrics.hpp"
#include "xres/model.hpp"
#include "xres/nsrt.hpp"
#include "xres/optim.hpp"

namespace xres {

namespace fs = std::filesystem;

struct Tile {
  std::string name;
  ImageRaster image;
  LabelRaster truth, outdated;
};

// ------------------------------------------------------------------ datasets

inline std::vector<Tile> synth_tiles(const RunConfig& cfg) {
  std::vector<Tile> tiles;
  for (std::size_t i = 0; i < cfg.data.tiles; ++i) {
    auto w = synth_world(cfg.scene(i));
    char name[32];
    std::snprintf(name, sizeof name, "tile_%03zu", i);
    tiles.push_back({name, std::move(w.image), std::move(w.truth), std::move(w.outdated)});
  }
  return tiles;
}

inline void write_dataset(const fs::path& dir, const std::vector<Tile>& tiles, const RunConfig& cfg) {
  fs::create_directories(dir);
  nlohmann::ordered_json m;
  const SceneSpec s = cfg.scene(0);
  m["scene"] = {{"size", s.size},       {"classes", s.classes}, {"blobs", s.blobs},
                {"rho_mis", s.rho_mis}, {"rho_chg", s.rho_chg}, {"block", s.block}};
  m["seed"] = cfg.seed;
  m["tiles"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    const auto& t = tiles[i];
    const std::string img = t.name + "_image.nsrt", tru = t.name + "_truth.nsrt", old = t.name + "_outdated.nsrt";
    write_raster_file(dir / img, to_raster(t.image));
    write_raster_file(dir / tru, to_raster(t.truth));
    write_raster_file(dir / old, to_raster(t.outdated));
    m["tiles"].push_back(
        {{"name", t.name}, {"seed", cfg.scene(i).seed}, {"image", img}, {"truth", tru}, {"outdated", old}});
  }
  std::ofstream os(dir / "manifest.json");
  if (!os) throw FormatError("cannot write manifest in " + dir.string());
  os << m.dump(2) << "\n";
}

inline std::vector<Tile> read_dataset(const fs::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw DataError("no manifest.json in " + dir.string());
  const auto m = nlohmann::json::parse(is);
  std::vector<Tile> tiles;
  for (const auto& e : m.at("tiles")) {
    Tile t;
    t.name = e.at("name").get<std::string>();
    t.image = image_from_raster(read_raster_file(dir / e.at("image").get<std::string>()));
    t.truth = labels_from_raster(read_raster_file(dir / e.at("truth").get<std::string>()));
    t.outdated = labels_from_raster(read_raster_file(dir / e.at("outdated").get<std::string>()));
    tiles.push_back(std::move(t));
  }
  return tiles;
}

// --------------------------------------------------------------- checkpoints

inline std::string model_config_json(const ModelConfig& c) {
  nlohmann::ordered_json j = {{"size", c.size},   {"channels", c.channels},   {"classes", c.classes},
                              {"in_channels", c.in_channels}, {"regions", c.regions}, {"topk", c.topk},
                              {"heads", c.heads}, {"mlp_ratio", c.mlp_ratio}, {"rdm", c.rdm}};
  return j.dump();
}

inline ModelConfig model_config_from_json(const std::string& s) {
  const auto j = nlohmann::json::parse(s);
  ModelConfig c;
  c.size = j.at("size");
  c.channels = j.at("channels");
  c.classes = j.at("classes");
  c.in_channels = j.at("in_channels");
  c.regions = j.at("regions");
  c.topk = j.at("topk").get<std::vector<std::size_t>>();
  c.heads = j.at("heads");
  c.mlp_ratio = j.at("mlp_ratio");
  c.rdm = j.at("rdm");
  return c;
}

inline constexpr const char* kConfigRecord = "__config__";

template <class T>
void save_checkpoint(const fs::path& path, const Model<T>& model) {
  std::vector<NamedRecord> recs;
  const std::string cj = model_config_json(model.config());
  recs.push_back({kConfigRecord,
                  RasterTensor::from_values<std::uint8_t>(
                      1, 1, static_cast<std::uint32_t>(cj.size()),
                      std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(cj.data()), cj.size()),
                      SemanticTag::checkpoint)});
  for (const auto& e : model.params().entries()) {
    const Shape& s = e.tensor.shape();
    std::size_t h = 1, w = 1, c = s.back();
    if (s.size() >= 2) w = s[s.size() - 2];
    for (std::size_t i = 0; i + 2 < s.size(); ++i) h *= s[i];
    std::vector<float> v(e.tensor.data().begin(), e.tensor.data().end());
    recs.push_back({e.name, RasterTensor::from_values<float>(static_cast<std::uint32_t>(h),
                                                            static_cast<std::uint32_t>(w),
                                                            static_cast<std::uint32_t>(c), v,
                                                            SemanticTag::checkpoint)});
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write checkpoint " + path.string());
  write_records(os, recs);
}

inline ModelConfig checkpoint_config(const std::vector<NamedRecord>& recs) {
  if (recs.empty() || recs[0].name != kConfigRecord) throw FormatError("checkpoint lacks a config record");
  const auto bytes = recs[0].raster.values<std::uint8_t>();
  return model_config_from_json(std::string(bytes.begin(), bytes.end()));
}

inline std::vector<NamedRecord> read_checkpoint_records(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path.string());
  return read_records(is);
}

// Loads parameters into `model`; its configuration must equal the stored one.
template <class T>
void load_checkpoint(const std::vector<NamedRecord>& recs, Model<T>& model) {
  if (model_config_json(checkpoint_config(recs)) != model_config_json(model.config()))
    throw ContractError("checkpoint model configuration does not match");
  auto& entries = model.params().entries();
  if (recs.size() != entries.size() + 1) throw ContractError("checkpoint parameter count does not match");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& r = recs[i + 1];
    auto& t = entries[i].tensor;
    if (r.name != entries[i].name || r.raster.elements() != t.numel())
      throw ContractError("checkpoint record " + r.name + " does not match parameter " + entries[i].name);
    const auto v = r.raster.values<float>();
    auto d = t.mutable_data();
    for (std::size_t j = 0; j < v.size(); ++j) d[j] = static_cast<T>(v[j]);
  }
}

template <class T>
Model<T> load_model(const fs::path& path) {
  const auto recs = read_checkpoint_records(path);
  Model<T> m(checkpoint_config(recs), 0);
  load_checkpoint(recs, m);
  return m;
}

// ------------------------------------------------------------------ training

template <class T>
Tensor<T> image_tensor(const ImageRaster& im) {
  return Tensor<T>({im.height, im.width, im.channels}, std::vector<T>(im.pixels.begin(), im.pixels.end()));
}

struct StepRecord {
  std::size_t epoch = 0, step = 0;
  double loss = 0, l_ca = 0, l_va = 0, ca_fraction = 0, lr = 0;

  nlohmann::ordered_json json() const {
    return {{"epoch", epoch}, {"step", step}, {"loss", loss}, {"l_ca", l_ca},
            {"l_va", l_va},   {"ca_fraction", ca_fraction},   {"lr", lr}};
  }
};

struct TrainHooks {
  std::ostream* log = nullptr;  // one JSON record per step and per epoch
  std::function<void(std::size_t epoch, double loss, bool best)> on_epoch;
  std::optional<fs::path> dump_dir;  // step dump on non-finite loss
};

struct TrainResult {
  std::vector<double> epoch_loss;
  double best_loss = 0;
  std::size_t best_epoch = 0;
  std::size_t steps = 0;
};

// Per-image loss for the configured objective.
template <class T>
LossBreakdown<T> objective(const Model<T>& model, const Patch& p, const std::string& loss) {
  auto fa = model.forward(image_tensor<T>(p.image));
  return loss == "ce" ? ce_loss(fa, p.outdated) : anlc_loss(fa, p.outdated);
}

template <class T>
TrainResult train(Model<T>& model, const std::vector<Tile>& tiles, const RunConfig& cfg, const TrainHooks& hooks = {}) {
  cfg.validate();
  if (tiles.empty()) throw DataError("no training tiles");
  AdamW<T> opt(model.params(), {.lr = cfg.optim.lr, .weight_decay = cfg.optim.weight_decay});
  PlateauSchedule plateau(cfg.optim.patience, cfg.optim.factor);
  Rng order_rng(cfg.seed ^ 0x5eedULL);
  TrainResult res;
  const std::size_t size = cfg.model.size;

  for (std::size_t epoch = 0; epoch < cfg.optim.epochs; ++epoch) {
    std::vector<Patch> patches;
    for (std::size_t t = 0; t < tiles.size(); ++t) {
      auto ps = crop_patches(tiles[t].image, tiles[t].truth, tiles[t].outdated, cfg.data.patches, size,
                             cfg.seed * 7919ULL + epoch * 131ULL + t);
      for (auto& p : ps) patches.push_back(std::move(p));
    }
    for (std::size_t i = patches.size(); i > 1; --i) std::swap(patches[i - 1], patches[order_rng.below(i)]);

    double epoch_sum = 0;
    for (std::size_t b0 = 0; b0 < patches.size(); b0 += cfg.optim.batch) {
      const std::size_t b1 = std::min(patches.size(), b0 + cfg.optim.batch);
      model.params().zero_grad();
      StepRecord rec{epoch, res.steps, 0, 0, 0, 0, opt.lr()};
      for (std::size_t i = b0; i < b1; ++i) {
        Tape<T> tape;
        TapeScope<T> scope(tape);
        LossBreakdown<T> l;
        try {
          l = objective(model, patches[i], cfg.optim.loss);
        } catch (const NumericError& e) {
          if (hooks.dump_dir) {
            fs::create_directories(*hooks.dump_dir);
            nlohmann::ordered_json d = rec.json();
            d["patch"] = {{"x0", patches[i].x0}, {"y0", patches[i].y0}};
            d["error"] = e.what();
            std::ofstream(*hooks.dump_dir / "nonfinite_step.json") << d.dump(2) << "\n";
            save_checkpoint(*hooks.dump_dir / "nonfinite_step.ckpt", model);
          }
          throw NumericError("step " + std::to_string(res.steps) + ": " + e.what());
        }
        backward(l.total);
        rec.loss += static_cast<double>(l.l_ann);
        rec.l_ca += static_cast<double>(l.l_ca);
        rec.l_va += static_cast<double>(l.l_va);
        rec.ca_fraction += l.ca_fraction;
      }
      const double n = static_cast<double>(b1 - b0);
      rec.loss /= n;
      rec.l_ca /= n;
      rec.l_va /= n;
      rec.ca_fraction /= n;
      opt.step(n);
      epoch_sum += rec.loss * n;
      ++res.steps;
      if (hooks.log) *hooks.log << rec.json().dump() << "\n";
    }
    const double epoch_loss = epoch_sum / static_cast<double>(patches.size());
    res.epoch_loss.push_back(epoch_loss);
    const bool best = epoch == 0 || epoch_loss < res.best_loss;
    if (best) {
      res.best_loss = epoch_loss;
      res.best_epoch = epoch;
    }
    double lr = opt.lr();
    const bool reduced = plateau.update(epoch_loss, lr);
    opt.set_lr(lr);
    if (hooks.log)
      *hooks.log << nlohmann::ordered_json{{"epoch", epoch}, {"epoch_loss", epoch_loss}, {"best", best},
                                           {"lr", opt.lr()}, {"lr_reduced", reduced}}
                        .dump()
                 << "\n";
    if (hooks.on_epoch) hooks.on_epoch(epoch, epoch_loss, best);
  }
  return res;
}

// ---------------------------------------------------------------- prediction

// Per-pixel argmax of O over non-overlapping model-sized windows.
template <class T>
LabelRaster predict(const Model<T>& model, const ImageRaster& image) {
  const std::size_t s = model.config().size;
  if (image.channels != model.config().in_channels)
    throw ContractError("image has " + std::to_string(image.channels) + " bands, model expects " +
                        std::to_string(model.config().in_channels));
  if (image.height % s != 0 || image.width % s != 0)
    throw DimensionError("image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                         " is not tiled by " + std::to_string(s) + "-pixel windows");
  NoGradScope<T> no_grad;
  const std::size_t k = model.config().classes;
  LabelRaster out(image.height, image.width);
  for (std::size_t y0 = 0; y0 < image.height; y0 += s)
    for (std::size_t x0 = 0; x0 < image.width; x0 += s) {
      const auto out_logits = model.forward(image_tensor<T>(crop(image, x0, y0, s))).logits;
      const auto logits = out_logits.data();
      for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s; ++x) {
          const T* z = logits.data() + (y * s + x) * k;
          std::size_t best = 0;
          for (std::size_t c = 1; c < k; ++c)
            if (z[c] > z[best]) best = c;
          out.at(y0 + y, x0 + x) = static_cast<std::uint8_t>(best);
        }
    }
  return out;
}

// Aggregate confusion of model predictions against clean truth.
template <class T>
ConfusionMatrix evaluate(const Model<T>& model, const std::vector<Tile>& tiles) {
  ConfusionMatrix cm(model.config().classes);
  for (const auto& t : tiles) cm += confusion(predict(model, t.image), t.truth, model.config().classes);
  return cm;
}

}  // namespace xres
