#include "evtforce/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <ctime>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "evtforce/binary_io.hpp"

namespace evtforce::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

std::uint64_t fnv1a(std::string_view text, std::uint64_t h = kFnvOffset) {
  for (unsigned char c : text) {
    h ^= c;
    h *= kFnvPrime;
  }
  return h;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Reads typed values out of one config section and rejects unknown keys.
class SectionReader {
 public:
  SectionReader(const json& j, std::string section) : j_(j), section_(std::move(section)) {
    if (!j_.is_object()) throw ConfigError(section_ + " must be a JSON object");
  }

  template <typename T>
  void read(const std::string& key, T& field) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const json& v = j_.at(key);
    bool ok = false;
    if constexpr (std::is_same_v<T, bool>) {
      ok = v.is_boolean();
    } else if constexpr (std::is_integral_v<T>) {
      ok = v.is_number_integer() && (std::is_signed_v<T> || v.is_number_unsigned());
    } else if constexpr (std::is_floating_point_v<T>) {
      ok = v.is_number();
    } else if constexpr (std::is_same_v<T, std::string>) {
      ok = v.is_string();
    } else {
      ok = true;
    }
    if (!ok) throw ConfigError(name(key) + " has the wrong type");
    try {
      field = v.get<T>();
    } catch (const json::exception&) {
      throw ConfigError(name(key) + " has the wrong type");
    }
  }

  const json* raw(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string name(const std::string& key) const { return section_ + "." + key; }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError(name(key) + " is not a known setting");
    }
  }

 private:
  const json& j_;
  std::string section_;
  std::set<std::string> seen_;
};

PipelineConfig parse_config(const json& j) {
  PipelineConfig c;
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    static const std::set<std::string> known = {"seed", "scene", "frame", "model", "train"};
    if (!known.count(key)) throw ConfigError(key + " is not a known config section");
  }
  if (j.contains("seed")) {
    if (!j["seed"].is_number_unsigned() && !(j["seed"].is_number_integer() && j["seed"] >= 0)) {
      throw ConfigError("seed must be a non-negative integer");
    }
    c.seed = j["seed"].get<std::uint64_t>();
  }
  if (j.contains("scene")) {
    SectionReader r(j["scene"], "scene");
    auto& s = c.scene;
    r.read("width", s.width);
    r.read("height", s.height);
    r.read("delta_max", s.delta_max);
    r.read("f_max", s.f_max);
    r.read("background", s.background);
    r.read("foreground", s.foreground);
    r.read("C", s.contrast_threshold);
    r.read("supersample", s.supersample);
    r.read("noise_rate_hz", s.noise_rate_hz);
    r.read("base_x", s.base_x);
    r.read("tip_x", s.tip_x);
    if (const json* finger = r.raw("finger")) {
      if (!finger->is_array()) throw ConfigError("scene.finger must be an array of [x, y]");
      s.finger.clear();
      for (const auto& p : *finger) {
        if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number()) {
          throw ConfigError("scene.finger must be an array of [x, y]");
        }
        s.finger.push_back({p[0].get<double>(), p[1].get<double>()});
      }
    }
    r.read("recordings", c.synth.recordings);
    r.read("trial_seconds", c.synth.trial_seconds);
    r.read("rate_hz", c.synth.rate_hz);
    r.read("substeps", c.synth.substeps);
    r.finish();
  }
  if (j.contains("frame")) {
    SectionReader r(j["frame"], "frame");
    r.read("window_us", c.frame.window_us);
    std::string mode = to_string(c.frame.mode);
    r.read("mode", mode);
    try {
      c.frame.mode = parse_accumulation_mode(mode);
    } catch (const std::invalid_argument&) {
      throw ConfigError("frame.mode must be one of binary, count, polarity2ch");
    }
    r.read("out_size", c.frame.out_size);
    r.read("normalize", c.frame.normalize);
    r.finish();
  }
  if (j.contains("model")) {
    SectionReader r(j["model"], "model");
    auto& m = c.model;
    r.read("image_size", m.image_size);
    r.read("patch_size", m.patch_size);
    r.read("in_channels", m.in_channels);
    r.read("embed_dim", m.embed_dim);
    r.read("depth", m.depth);
    r.read("num_heads", m.num_heads);
    r.read("mlp_ratio", m.mlp_ratio);
    r.read("head_output", m.head_output);
    r.finish();
  }
  if (j.contains("train")) {
    SectionReader r(j["train"], "train");
    auto& t = c.train;
    r.read("learning_rate", t.learning_rate);
    r.read("batch_size", t.batch_size);
    r.read("epochs", t.epochs);
    if (const json* split = r.raw("split")) {
      if (!split->is_array() || split->size() != 3 ||
          !std::all_of(split->begin(), split->end(), [](const json& v) { return v.is_number(); })) {
        throw ConfigError("train.split must be [train, val, test] ratios");
      }
      t.split = {(*split)[0].get<double>(), (*split)[1].get<double>(), (*split)[2].get<double>()};
    }
    r.read("beta1", t.beta1);
    r.read("beta2", t.beta2);
    r.read("eps", t.eps);
    r.read("mape_floor", t.mape_floor);
    r.finish();
  }
  return c;
}

void set_override(json& root, const std::string& key, const std::string& text) {
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  if (key == "seed") {
    root["seed"] = value;
    return;
  }
  auto dot = key.find('.');
  if (dot == std::string::npos || dot == 0 || dot + 1 == key.size()) {
    throw ConfigError(key + " is not a section.key setting");
  }
  root[key.substr(0, dot)][key.substr(dot + 1)] = value;
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

void write_text(const fs::path& path, const std::string& text) {
  if (!binary::write_file(path, text)) {
    throw EventIoError(EventIoErrorKind::unwritable_path, path.string() + ": cannot write");
  }
}

json read_json_file(const fs::path& path) {
  std::string text;
  std::error_code ec;
  if (!fs::is_regular_file(path, ec) || !binary::read_file(path, text)) {
    throw EventIoError(EventIoErrorKind::missing_file, path.string() + ": no such file");
  }
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw EventIoError(EventIoErrorKind::invalid_content, path.string() + ": " + e.what());
  }
}

ForceTrack parse_track(const json& j, const fs::path& path) {
  try {
    ForceTrack t;
    t.rate_hz = j.at("rate_hz").get<double>();
    t.samples = j.at("samples").get<std::vector<double>>();
    if (!(t.rate_hz > 0)) throw std::invalid_argument("rate_hz must be > 0");
    return t;
  } catch (const std::exception& e) {
    throw EventIoError(EventIoErrorKind::invalid_content,
                       path.string() + ": bad label track: " + e.what());
  }
}

void ensure_directory(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (!fs::is_directory(dir, ec)) {
    throw EventIoError(EventIoErrorKind::unwritable_path, dir.string() + ": cannot create directory");
  }
}

std::string iso_utc_now() {
  auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void check_model_matches_frames(const vit::ViTConfig& model, const FrameDataset& ds) {
  if (ds.empty()) return;
  const auto& f = ds.frames.front();
  if (f.height != model.image_size || f.width != model.image_size) {
    throw ConfigError("model.image_size (" + std::to_string(model.image_size) +
                      ") does not match dataset frames of " + std::to_string(f.height) + "x" +
                      std::to_string(f.width));
  }
  if (f.channels != model.in_channels) {
    throw ConfigError("model.in_channels (" + std::to_string(model.in_channels) +
                      ") does not match dataset frames with " + std::to_string(f.channels) +
                      " channels");
  }
}

FrameSpec frame_spec_from_json(const json& j) {
  FrameSpec s;
  s.window_us = j.at("window_us").get<std::int64_t>();
  s.mode = parse_accumulation_mode(j.at("mode").get<std::string>());
  s.out_size = j.at("out_size").get<int>();
  s.normalize = j.at("normalize").get<bool>();
  s.validate();
  return s;
}

}  // namespace

void PipelineConfig::validate() const {
  try {
    scene.validate();
    frame.validate();
    model.validate();
    train.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (synth.recordings < 0) throw ConfigError("scene.recordings must be >= 0");
  if (!(synth.trial_seconds >= 0)) throw ConfigError("scene.trial_seconds must be >= 0");
  if (!(synth.rate_hz > 0)) throw ConfigError("scene.rate_hz must be > 0");
  if (synth.substeps < 1) throw ConfigError("scene.substeps must be >= 1");
}

nlohmann::json frame_spec_json(const FrameSpec& spec) {
  return {{"window_us", spec.window_us},
          {"mode", to_string(spec.mode)},
          {"out_size", spec.out_size},
          {"normalize", spec.normalize}};
}

json to_json(const PipelineConfig& c) {
  json finger = json::array();
  for (const auto& p : c.scene.finger) finger.push_back({p.x, p.y});
  return {
      {"seed", c.seed},
      {"scene",
       {{"width", c.scene.width},
        {"height", c.scene.height},
        {"delta_max", c.scene.delta_max},
        {"f_max", c.scene.f_max},
        {"background", c.scene.background},
        {"foreground", c.scene.foreground},
        {"C", c.scene.contrast_threshold},
        {"supersample", c.scene.supersample},
        {"noise_rate_hz", c.scene.noise_rate_hz},
        {"base_x", c.scene.base_x},
        {"tip_x", c.scene.tip_x},
        {"finger", finger},
        {"recordings", c.synth.recordings},
        {"trial_seconds", c.synth.trial_seconds},
        {"rate_hz", c.synth.rate_hz},
        {"substeps", c.synth.substeps}}},
      {"frame", frame_spec_json(c.frame)},
      {"model", vit::to_json(c.model)},
      {"train",
       {{"learning_rate", c.train.learning_rate},
        {"batch_size", c.train.batch_size},
        {"epochs", c.train.epochs},
        {"split", {c.train.split.train, c.train.split.val, c.train.split.test}},
        {"beta1", c.train.beta1},
        {"beta2", c.train.beta2},
        {"eps", c.train.eps},
        {"mape_floor", c.train.mape_floor}}},
  };
}

PipelineConfig load_config(const std::optional<fs::path>& file,
                           const std::vector<std::pair<std::string, std::string>>& overrides,
                           std::optional<std::uint64_t> seed) {
  json merged = to_json(PipelineConfig{});
  if (file) {
    json from_file = read_json_file(*file);
    if (!from_file.is_object()) throw ConfigError(file->string() + ": config must be a JSON object");
    for (const auto& [section, value] : from_file.items()) {
      if (value.is_object() && merged.contains(section) && merged[section].is_object()) {
        for (const auto& [key, v] : value.items()) merged[section][key] = v;
      } else {
        merged[section] = value;
      }
    }
  }
  for (const auto& [key, value] : overrides) set_override(merged, key, value);
  if (seed) merged["seed"] = *seed;
  PipelineConfig config = parse_config(merged);
  config.train.seed = sub_seed(config.seed, "train.shuffle");
  config.scene.noise_seed = sub_seed(config.seed, "scene.noise");
  config.validate();
  return config;
}

std::uint64_t config_hash(const PipelineConfig& config) { return fnv1a(to_json(config).dump()); }

std::uint64_t sub_seed(std::uint64_t seed, std::string_view name, std::uint64_t index) {
  return splitmix64(splitmix64(seed ^ fnv1a(name)) + index);
}

std::vector<Recording> load_recordings(const fs::path& dir) {
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) {
    throw EventIoError(EventIoErrorKind::missing_file, dir.string() + ": no such directory");
  }
  std::vector<std::string> ids;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    constexpr std::string_view kSuffix = ".labels.json";
    if (entry.is_regular_file() && name.size() > kSuffix.size() && name.ends_with(kSuffix)) {
      ids.push_back(name.substr(0, name.size() - kSuffix.size()));
    }
  }
  std::sort(ids.begin(), ids.end());

  std::vector<Recording> recs;
  for (const auto& id : ids) {
    Recording rec;
    rec.id = id;
    const fs::path labels = dir / (id + ".labels.json");
    rec.track = parse_track(read_json_file(labels), labels);
    fs::path events = dir / (id + ".evb");
    if (!fs::exists(events)) events = dir / (id + ".csv");
    rec.stream = read_events(events, format_for_path(events));
    rec.duration_us = rec.track.samples.empty()
                          ? 0
                          : rec.track.period_us() *
                                static_cast<std::int64_t>(rec.track.samples.size() - 1);
    recs.push_back(std::move(rec));
  }
  return recs;
}

int cmd_synth(const PipelineConfig& config, const fs::path& out_dir, int n, EventFormat format,
              std::ostream& out) {
  if (n < 0) throw ConfigError("--count must be >= 0");
  ensure_directory(out_dir);
  json recordings = json::array();
  for (int r = 0; r < n; ++r) {
    char id[32];
    std::snprintf(id, sizeof(id), "rec_%03d", r);
    auto profile = synth::grasp_profile(config.synth.trial_seconds, config.synth.rate_hz,
                                        config.scene.f_max, sub_seed(config.seed, "synth.profile", r));
    auto scene = config.scene;
    scene.noise_seed = sub_seed(config.seed, "scene.noise", r);
    auto rec = synth::synthesize_recording(scene, profile, config.synth.substeps);

    const std::string events_name =
        std::string(id) + (format == EventFormat::csv ? ".csv" : ".evb");
    const std::string labels_name = std::string(id) + ".labels.json";
    write_events(rec.stream, out_dir / events_name, format);
    json track = {{"rate_hz", profile.rate_hz}, {"samples", profile.samples}};
    write_text(out_dir / labels_name, track.dump() + "\n");
    recordings.push_back({{"id", id},
                          {"events", events_name},
                          {"labels", labels_name},
                          {"event_count", rec.stream.size()},
                          {"duration_us", rec.duration_us}});
  }
  char hash[17];
  std::snprintf(hash, sizeof(hash), "%016llx",
                static_cast<unsigned long long>(config_hash(config)));
  json manifest = {{"config_hash", hash},
                   {"seed", config.seed},
                   {"config", to_json(config)},
                   {"recordings", recordings}};
  write_text(out_dir / "manifest.json", manifest.dump(2) + "\n");
  out << "wrote " << n << " recordings to " << out_dir.string() << "\n";
  return kOk;
}

int cmd_convert(const PipelineConfig& config, const fs::path& in_dir, const fs::path& out_file,
                std::ostream& out) {
  auto recordings = load_recordings(in_dir);
  if (recordings.empty()) throw ConfigError(in_dir.string() + ": no recordings");
  auto ds = build_dataset(recordings, config.frame, {0.0, config.scene.f_max});
  write_frd1(ds, out_file);

  json sources = json::array();
  for (const auto& rec : recordings) {
    sources.push_back({{"id", rec.id},
                       {"duration_us", rec.duration_us},
                       {"frames", rec.duration_us / config.frame.window_us}});
  }
  json sidecar = {{"source_recordings", sources},
                  {"spec", frame_spec_json(config.frame)},
                  {"frame_count", ds.size()},
                  {"created_utc", iso_utc_now()}};
  write_text(fs::path(out_file.string() + ".json"), sidecar.dump(2) + "\n");
  out << ds.size() << " frames\n";
  return kOk;
}

int cmd_train(const PipelineConfig& config, const fs::path& dataset, const fs::path& out_prefix,
              std::ostream& out) {
  auto ds = read_frd1(dataset);
  if (ds.empty()) throw ConfigError(dataset.string() + ": dataset is empty");
  check_model_matches_frames(config.model, ds);
  auto split = train::split_dataset(ds, config.train.split, sub_seed(config.seed, "train.split"));
  if (split.train.empty()) throw ConfigError("train.split leaves no training frames");
  auto init = vit::init_params<float>(config.model, sub_seed(config.seed, "model.init"));

  auto result = train::train(init, ds, split, config.train, [&](const train::EpochLog& e) {
    out << "epoch " << e.epoch << " train_mse " << format_double(e.train_mse);
    if (e.val_mse) out << " val_mse " << format_double(*e.val_mse);
    out << std::endl;
  });

  json frame = frame_spec_json(config.frame);
  const fs::path sidecar_path(dataset.string() + ".json");
  if (fs::exists(sidecar_path)) {
    auto sidecar = read_json_file(sidecar_path);
    if (sidecar.contains("spec")) frame = frame_spec_json(frame_spec_from_json(sidecar["spec"]));
  }
  json extra = {{"frame", frame},
                {"seed", config.seed},
                {"best_epoch", result.best_epoch}};
  vit::save_checkpoint(result.best, out_prefix, extra);
  write_text(fs::path(out_prefix.string() + ".log.csv"), train::log_to_csv(result.log));

  json metrics = json::object();
  if (!split.val.empty()) {
    metrics["val"] = train::evaluate(result.best, ds, split.val, config.train.mape_floor).to_json();
  }
  if (!split.test.empty()) {
    metrics["test"] =
        train::evaluate(result.best, ds, split.test, config.train.mape_floor).to_json();
  }
  json summary = {{"best_epoch", result.best_epoch},
                  {"initial_train_mse", result.initial_train_mse},
                  {"split_sizes", {split.train.size(), split.val.size(), split.test.size()}},
                  {"metrics", metrics}};
  write_text(fs::path(out_prefix.string() + ".summary.json"), summary.dump(2) + "\n");
  out << summary.dump() << "\n";
  return kOk;
}

int cmd_eval(const PipelineConfig& config, const fs::path& checkpoint, const fs::path& dataset,
             const std::string& split_name, std::ostream& out) {
  auto model = vit::load_checkpoint(checkpoint);
  auto ds = read_frd1(dataset);
  if (ds.empty()) throw ConfigError(dataset.string() + ": dataset is empty");
  check_model_matches_frames(model.config, ds);
  std::vector<std::size_t> indices;
  if (split_name == "all") {
    indices.resize(ds.size());
    std::iota(indices.begin(), indices.end(), std::size_t{0});
  } else {
    auto split = train::split_dataset(ds, config.train.split, sub_seed(config.seed, "train.split"));
    if (split_name == "train") indices = split.train;
    else if (split_name == "val") indices = split.val;
    else if (split_name == "test") indices = split.test;
    else throw ConfigError("--split must be all, train, val or test");
  }
  if (indices.empty()) throw ConfigError("--split " + split_name + " selects no frames");
  out << train::evaluate(model, ds, indices, config.train.mape_floor).to_json().dump() << "\n";
  return kOk;
}

int cmd_predict(const PipelineConfig& config, const fs::path& checkpoint, const fs::path& input,
                std::optional<std::int64_t> duration_us, std::ostream& out) {
  json extra;
  auto model = vit::load_checkpoint(checkpoint, &extra);
  FrameDataset ds;
  if (input.extension() == ".frd") {
    ds = read_frd1(input);
  } else {
    FrameSpec spec = config.frame;
    if (extra.contains("frame")) {
      try {
        spec = frame_spec_from_json(extra["frame"]);
      } catch (const std::exception& e) {
        throw vit::CheckpointError(vit::CheckpointError::Kind::corrupt,
                                   checkpoint.string() + ": bad frame spec: " + e.what());
      }
    }
    auto stream = read_events(input, format_for_path(input));
    const std::int64_t duration = duration_us.value_or(implied_duration_us(stream));
    for (std::int64_t t0 = 0; t0 + spec.window_us <= duration; t0 += spec.window_us) {
      auto [first, last] = window_bounds(stream, t0, t0 + spec.window_us);
      ds.frames.push_back(accumulate_range(stream, first, last, spec, t0));
      ds.labels.push_back(0.0);
    }
  }
  if (ds.empty()) return kOk;
  check_model_matches_frames(model.config, ds);
  std::vector<std::size_t> all(ds.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  for (double f : train::predict(model, ds, all)) {
    if (!std::isfinite(f)) {
      throw std::logic_error("model produced a non-finite force");
    }
    out << format_double(f) << "\n";
  }
  return kOk;
}

int cmd_bench(const PipelineConfig& config, const fs::path& events, double min_seconds,
              std::ostream& out) {
  auto stream = read_events(events, format_for_path(events));
  const std::int64_t window = config.frame.window_us;
  const std::int64_t duration = implied_duration_us(stream);
  json modes = json::object();
  for (auto mode : {AccumulationMode::count, AccumulationMode::binary,
                    AccumulationMode::polarity2ch}) {
    using clock = std::chrono::steady_clock;
    std::size_t processed = 0;
    double checksum = 0;
    const auto start = clock::now();
    double elapsed = 0;
    do {
      for (std::int64_t t0 = 0; t0 < std::max<std::int64_t>(duration, 1); t0 += window) {
        auto [first, last] = window_bounds(stream, t0, t0 + window);
        auto frame = accumulate_events(stream, first, last, mode);
        checksum += frame.data.empty() ? 0.0 : frame.data.front();
        processed += last - first;
      }
      elapsed = std::chrono::duration<double>(clock::now() - start).count();
    } while (elapsed < min_seconds);
    const double rate = processed > 0 && elapsed > 0 ? double(processed) / elapsed : 0.0;
    modes[to_string(mode)] = {{"events_per_second", rate}, {"seconds", elapsed},
                              {"events_processed", processed}};
    (void)checksum;
  }
  json report = {{"events", stream.size()}, {"window_us", window}, {"modes", modes}};
  out << report.dump() << "\n";
  return kOk;
}

namespace {

int exit_code_for(const std::exception_ptr& ep, std::ostream& err) {
  try {
    std::rethrow_exception(ep);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const EventIoError& e) {
    err << "error: " << e.what() << "\n";
    switch (e.kind()) {
      case EventIoErrorKind::missing_file:
      case EventIoErrorKind::unwritable_path:
        return kIo;
      case EventIoErrorKind::invalid_stream:
        return kInternal;
      default:
        return kInternal;
    }
  } catch (const FrameIoError& e) {
    err << "error: " << e.what() << "\n";
    return e.kind() == FrameIoErrorKind::corrupt ? kInternal : kIo;
  } catch (const vit::CheckpointError& e) {
    err << "error: " << e.what() << "\n";
    return e.kind() == vit::CheckpointError::Kind::corrupt ? kInternal : kIo;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return kInternal;
  }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Event-camera force regression toolkit", "evtforce"};
  app.require_subcommand(1);

  std::optional<std::string> config_path;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;
  std::string out_path;

  auto common = [&](CLI::App* cmd, bool needs_out) {
    cmd->add_option("--config", config_path, "JSON config file");
    cmd->add_option("--seed", seed, "Pipeline seed");
    cmd->add_option("--set", sets, "Override a config value: section.key=value");
    auto* o = cmd->add_option("--out", out_path, "Output path");
    if (needs_out) o->required();
  };

  int count = -1;
  std::string format_name = "binary";
  auto* synth = app.add_subcommand("synth", "Synthesize labeled gripper recordings");
  common(synth, true);
  synth->add_option("-n,--count", count, "Number of recordings (default from config)");
  synth->add_option("--format", format_name, "Event file format")
      ->check(CLI::IsMember({"binary", "csv"}));

  std::string in_dir;
  std::optional<std::int64_t> window_us;
  std::optional<std::string> mode;
  std::optional<int> out_size;
  std::optional<bool> normalize;
  auto* convert = app.add_subcommand("convert", "Window event recordings into an FRD1 dataset");
  common(convert, true);
  convert->add_option("--in", in_dir, "Directory of recordings")->required();
  convert->add_option("--window-us", window_us, "Window length in microseconds");
  convert->add_option("--mode", mode, "Accumulation mode (binary|count|polarity2ch)");
  convert->add_option("--out-size", out_size, "Square output side in pixels");
  convert->add_option("--normalize", normalize, "Scale each frame by its maximum");

  std::string dataset;
  std::optional<int> epochs;
  auto* trn = app.add_subcommand("train", "Train the regressor on an FRD1 dataset");
  common(trn, true);
  trn->add_option("--dataset", dataset, "FRD1 dataset")->required();
  trn->add_option("--epochs", epochs, "Training epochs");

  std::string checkpoint;
  std::string split_name = "all";
  auto* eval = app.add_subcommand("eval", "Report RMSE, R^2 and MAPE on a dataset");
  common(eval, false);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint prefix")->required();
  eval->add_option("--dataset", dataset, "FRD1 dataset")->required();
  eval->add_option("--split", split_name, "all|train|val|test");

  std::string input;
  std::optional<std::int64_t> duration_us;
  auto* pred = app.add_subcommand("predict", "Print one force per frame");
  common(pred, false);
  pred->add_option("--checkpoint", checkpoint, "Checkpoint prefix")->required();
  pred->add_option("--input", input, "Event file (.evb/.csv) or FRD1 dataset (.frd)")->required();
  pred->add_option("--duration-us", duration_us, "Recording length for event input");

  double min_seconds = 0.5;
  auto* bench = app.add_subcommand("bench", "Measure accumulation throughput per mode");
  common(bench, false);
  bench->add_option("--input", input, "Event file")->required();
  bench->add_option("--min-seconds", min_seconds, "Minimum timing duration per mode");

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  try {
    app.parse(argv_rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }

  try {
    std::vector<std::pair<std::string, std::string>> overrides;
    for (const auto& s : sets) {
      auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects section.key=value, got " + s);
      overrides.emplace_back(s.substr(0, eq), s.substr(eq + 1));
    }
    if (window_us) overrides.emplace_back("frame.window_us", std::to_string(*window_us));
    if (mode) overrides.emplace_back("frame.mode", json(*mode).dump());
    if (out_size) overrides.emplace_back("frame.out_size", std::to_string(*out_size));
    if (normalize) overrides.emplace_back("frame.normalize", *normalize ? "true" : "false");
    if (epochs) overrides.emplace_back("train.epochs", std::to_string(*epochs));

    std::optional<fs::path> cfg_file;
    if (config_path) cfg_file = fs::path(*config_path);
    auto config = load_config(cfg_file, overrides, seed);

    if (*synth) {
      const int n = count >= 0 ? count : config.synth.recordings;
      return cmd_synth(config, out_path, n,
                       format_name == "csv" ? EventFormat::csv : EventFormat::binary, out);
    }
    if (*convert) return cmd_convert(config, in_dir, out_path, out);
    if (*trn) return cmd_train(config, dataset, out_path, out);
    if (*eval) return cmd_eval(config, checkpoint, dataset, split_name, out);
    if (*pred) return cmd_predict(config, checkpoint, input, duration_us, out);
    if (*bench) return cmd_bench(config, input, min_seconds, out);
    err << "error: no command\n";
    return kUsage;
  } catch (...) {
    return exit_code_for(std::current_exception(), err);
  }
}

}  // namespace evtforce::cli
