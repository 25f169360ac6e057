// xres: synth | train | predict | eval | verify

#include <png.h>

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "xres/config.hpp"
#include "xres/train.hpp"
#include "xres/verify.hpp"

namespace fs = std::filesystem;
using namespace xres;

namespace {

// I.S., T.C., L.V., W.
constexpr std::uint8_t kPalette[4][3] = {{200, 60, 60}, {30, 110, 40}, {150, 200, 90}, {40, 90, 200}};

void write_png(const fs::path& path, const LabelRaster& labels) {
  std::vector<std::uint8_t> rgb(labels.size() * 3);
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (std::size_t c = 0; c < 3; ++c) rgb[i * 3 + c] = kPalette[labels.labels[i] % 4][c];
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(labels.width);
  img.height = static_cast<png_uint_32>(labels.height);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, rgb.data(), 0, nullptr))
    throw FormatError("cannot write PNG " + path.string() + ": " + img.message);
}

RunConfig resolve(const std::string& file, const std::vector<std::string>& sets) {
  RunConfig c = file.empty() ? RunConfig{} : load_config(file);
  for (const auto& s : sets) apply_override(c, s);
  c.validate();
  return c;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write " + path.string());
  os << text;
}

int cmd_synth(const RunConfig& cfg) {
  const fs::path dir = cfg.data.dir;
  write_dataset(dir, synth_tiles(cfg), cfg);
  write_text(dir / "config.txt", dump_config(cfg));
  std::cout << "wrote " << cfg.data.tiles << " tiles to " << dir.string() << "\n";
  return 0;
}

int cmd_train(const RunConfig& cfg) {
  const auto tiles = read_dataset(cfg.data.dir);
  const fs::path out = cfg.data.out;
  fs::create_directories(out);
  write_text(out / "config.txt", dump_config(cfg));
  Model<float> model(cfg.model, cfg.seed);
  std::ofstream log(out / "train.jsonl");
  TrainHooks hooks;
  hooks.log = &log;
  hooks.dump_dir = out;
  hooks.on_epoch = [&](std::size_t epoch, double loss, bool best) {
    if (best) save_checkpoint(out / "best.ckpt", model);
    std::cout << "epoch " << epoch << " loss " << loss << (best ? " (best)" : "") << "\n";
  };
  const auto res = train(model, tiles, cfg, hooks);
  save_checkpoint(out / "final.ckpt", model);
  std::cout << "parameters " << model.parameter_count() << ", best epoch " << res.best_epoch << " loss "
            << res.best_loss << "\n";
  return 0;
}

int cmd_predict(const fs::path& ckpt, const std::string& image, const std::string& data, const fs::path& out,
                bool png) {
  const auto model = load_model<float>(ckpt);
  auto emit = [&](const ImageRaster& im, const fs::path& dst) {
    const auto pred = predict(model, im);
    write_raster_file(dst, to_raster(pred));
    if (png) write_png(fs::path(dst).replace_extension(".png"), pred);
  };
  if (!image.empty()) {
    emit(image_from_raster(read_raster_file(image)), out);
    return 0;
  }
  fs::create_directories(out);
  for (const auto& t : read_dataset(data)) emit(t.image, out / (t.name + "_pred.nsrt"));
  return 0;
}

int cmd_eval(const fs::path& pred_dir, const fs::path& truth_dir, std::size_t classes) {
  ConfusionMatrix total(classes);
  for (const auto& t : read_dataset(truth_dir)) {
    const auto pred = labels_from_raster(read_raster_file(pred_dir / (t.name + "_pred.nsrt")));
    const auto cm = confusion(pred, t.truth, classes);
    total += cm;
    std::cout << scores_json(t.name, cm).dump() << "\n";
  }
  std::cout << scores_json("aggregate", total).dump() << "\n";
  return 0;
}

int cmd_verify() {
  bool ok = true;
  for (const auto& r : verify_all()) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << " [" << r.seconds << " s]\n";
    ok = ok && r.passed;
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-resolution land cover training from outdated labels"};
  app.require_subcommand(1);
  std::string config;
  std::vector<std::string> sets;
  auto add_config = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config, "key = value config file");
    sub->add_option("-s,--set", sets, "override, key=value (repeatable)");
  };

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  add_config(synth);
  auto* train_cmd = app.add_subcommand("train", "train a model");
  add_config(train_cmd);

  auto* pred = app.add_subcommand("predict", "predict label rasters");
  std::string ckpt, image, data, out;
  bool png = false;
  pred->add_option("--checkpoint", ckpt)->required();
  auto* img_opt = pred->add_option("--image", image, "single NSRT image");
  pred->add_option("--data", data, "dataset directory")->excludes(img_opt);
  pred->add_option("--out", out, "output file (--image) or directory (--data)")->required();
  pred->add_flag("--png", png, "also write colour PNGs");

  auto* ev = app.add_subcommand("eval", "score predictions against truth");
  std::string pred_dir, truth_dir;
  std::size_t classes = 4;
  ev->add_option("--pred", pred_dir)->required();
  ev->add_option("--truth", truth_dir, "dataset directory")->required();
  ev->add_option("--classes", classes);

  auto* verify = app.add_subcommand("verify", "run self-check suites");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*synth) return cmd_synth(resolve(config, sets));
    if (*train_cmd) return cmd_train(resolve(config, sets));
    if (*pred) {
      if (image.empty() && data.empty()) throw ConfigError("predict needs --image or --data");
      return cmd_predict(ckpt, image, data, out, png);
    }
    if (*ev) return cmd_eval(pred_dir, truth_dir, classes);
    if (*verify) return cmd_verify();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
