#include "fedgin/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <stdexcept>

namespace fedgin {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string to_string(Modality m) { return m == Modality::A ? "A" : "B"; }

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

Modality parse_modality(const std::string& s) {
  if (s == "A" || s == "a") return Modality::A;
  if (s == "B" || s == "b") return Modality::B;
  throw std::invalid_argument("unknown modality '" + s + "' (expected A or B)");
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw std::invalid_argument("unknown split '" + s + "' (expected train, val or test)");
}

// --- phantoms ---------------------------------------------------------------

double Phantom::organ_fraction() const {
  if (labels.empty()) return 0.0;
  const auto n = std::count(labels.begin(), labels.end(), tissue::kOrgan);
  return static_cast<double>(n) / static_cast<double>(labels.size());
}

int Phantom::slices_with_organ() const {
  int count = 0;
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  for (int s = 0; s < slices; ++s) {
    auto begin = labels.begin() + static_cast<std::ptrdiff_t>(s * plane);
    if (std::find(begin, begin + static_cast<std::ptrdiff_t>(plane), tissue::kOrgan) != begin + static_cast<std::ptrdiff_t>(plane)) ++count;
  }
  return count;
}

namespace {

// A slowly varying quantity over normalized depth z in [0,1].
struct Drift {
  double base = 0.0, amplitude = 0.0, frequency = 0.0, phase = 0.0;
  [[nodiscard]] double at(double z) const {
    return base + amplitude * std::sin(2.0 * std::numbers::pi * frequency * z + phase);
  }
  static Drift sample(RngStream& rng, double base, double amplitude) {
    return {base, amplitude * rng.uniform(0.3, 1.0), rng.uniform(0.25, 0.9), rng.uniform(0.0, 2.0 * std::numbers::pi)};
  }
};

struct EllipseTrack {
  Drift cy, cx, ay, ax;
  double angle = 0.0;
};

void paint(std::vector<std::uint8_t>& plane, int h, int w, double cy, double cx, double ay, double ax,
           double angle, std::uint8_t label) {
  if (ay <= 0.0 || ax <= 0.0) return;
  const double c = std::cos(angle), s = std::sin(angle);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double dy = (y + 0.5) - cy, dx = (x + 0.5) - cx;
      const double u = (c * dx + s * dy) / ax;
      const double v = (-s * dx + c * dy) / ay;
      if (u * u + v * v <= 1.0) plane[static_cast<std::size_t>(y) * w + x] = label;
    }
  }
}

}  // namespace

Phantom generate_phantom(std::uint64_t seed, int height, int width, int slices) {
  if (height < 8 || width < 8) throw std::invalid_argument("generate_phantom: H and W must be >= 8");
  if (slices < 4) throw std::invalid_argument("generate_phantom: need at least 4 slices");
  RngStream root(seed);
  const double H = height, W = width;

  RngStream body_rng = root.child("body");
  EllipseTrack body{Drift::sample(body_rng, H * body_rng.uniform(0.48, 0.52), 0.015 * H),
                    Drift::sample(body_rng, W * body_rng.uniform(0.48, 0.52), 0.015 * W),
                    Drift::sample(body_rng, H * body_rng.uniform(0.36, 0.44), 0.02 * H),
                    Drift::sample(body_rng, W * body_rng.uniform(0.40, 0.47), 0.02 * W), 0.0};

  RngStream dis_rng = root.child("distractors");
  const int distractors = 2 + static_cast<int>(dis_rng.uniform_index(3));
  std::vector<EllipseTrack> dis;
  for (int i = 0; i < distractors; ++i) {
    const double r = dis_rng.uniform(0.15, 0.6), t = dis_rng.uniform(0.0, 2.0 * std::numbers::pi);
    EllipseTrack e;
    e.cy = Drift::sample(dis_rng, body.cy.base + r * body.ay.base * std::sin(t), 0.03 * H);
    e.cx = Drift::sample(dis_rng, body.cx.base + r * body.ax.base * std::cos(t), 0.03 * W);
    e.ay = Drift::sample(dis_rng, H * dis_rng.uniform(0.05, 0.13), 0.015 * H);
    e.ax = Drift::sample(dis_rng, W * dis_rng.uniform(0.05, 0.13), 0.015 * W);
    e.angle = dis_rng.uniform(-1.0, 1.0);
    dis.push_back(e);
  }

  const std::size_t plane = static_cast<std::size_t>(height) * width;
  for (std::uint64_t attempt = 0;; ++attempt) {
    RngStream org_rng = root.child("organ").child(attempt);
    EllipseTrack organ;
    organ.cy = Drift::sample(org_rng, H * org_rng.uniform(0.38, 0.58), 0.04 * H);
    organ.cx = Drift::sample(org_rng, W * org_rng.uniform(0.56, 0.68), 0.04 * W);
    organ.ay = Drift::sample(org_rng, H * org_rng.uniform(0.06, 0.34), 0.02 * H);
    organ.ax = Drift::sample(org_rng, W * org_rng.uniform(0.06, 0.28), 0.02 * W);
    organ.angle = org_rng.uniform(-0.6, 0.6);
    const double extent = org_rng.uniform(0.65, 0.95);
    const double start = org_rng.uniform(0.0, 1.0 - extent);

    Phantom p;
    p.seed = seed;
    p.height = height;
    p.width = width;
    p.slices = slices;
    p.distractors = distractors;
    p.labels.assign(plane * static_cast<std::size_t>(slices), tissue::kBackground);
    for (int s = 0; s < slices; ++s) {
      const double z = (s + 0.5) / slices;
      std::vector<std::uint8_t> lab(plane, tissue::kBackground);
      paint(lab, height, width, body.cy.at(z), body.cx.at(z), body.ay.at(z), body.ax.at(z), 0.0, tissue::kBody);
      for (int i = 0; i < distractors; ++i) {
        const auto& e = dis[static_cast<std::size_t>(i)];
        paint(lab, height, width, e.cy.at(z), e.cx.at(z), e.ay.at(z), e.ax.at(z), e.angle,
              static_cast<std::uint8_t>(tissue::kFirstDistractor + i));
      }
      const double u = (z - (start + extent / 2.0)) / (extent / 2.0);
      if (std::abs(u) <= 1.0) {
        const double profile = std::sqrt(1.0 - 0.75 * u * u);
        const double wall = std::max(1.0, 0.04 * std::min(H, W));
        paint(lab, height, width, organ.cy.at(z), organ.cx.at(z), organ.ay.at(z) * profile + wall,
              organ.ax.at(z) * profile + wall, organ.angle, tissue::kCapsule);
        paint(lab, height, width, organ.cy.at(z), organ.cx.at(z), organ.ay.at(z) * profile,
              organ.ax.at(z) * profile, organ.angle, tissue::kOrgan);
      }
      std::copy(lab.begin(), lab.end(), p.labels.begin() + static_cast<std::ptrdiff_t>(s * plane));
    }
    const bool ok = p.organ_fraction() <= 0.25 && p.slices_with_organ() * 10 >= slices * 6;
    if (ok || attempt >= 64) return p;
  }
}

// --- rendering --------------------------------------------------------------

namespace {
constexpr std::array<float, tissue::kLabelCount> kIntensityA{0.00f, 0.40f, 0.80f, 0.10f, 0.20f, 0.55f, 0.95f, 0.65f};
constexpr std::array<float, tissue::kLabelCount> kIntensityB{0.05f, 0.60f, 0.30f, 0.80f, 0.85f, 0.35f, 0.15f, 0.45f};
}  // namespace

float modality_intensity(Modality modality, std::uint8_t label) {
  if (label >= tissue::kLabelCount) throw std::out_of_range("modality_intensity: unknown label");
  return modality == Modality::A ? kIntensityA[label] : kIntensityB[label];
}

std::vector<SliceSample> render_modality(const Phantom& phantom, Modality modality, std::uint64_t seed,
                                         const RenderOptions& options) {
  RngStream rng = RngStream(seed).child(to_string(modality));
  const int h = phantom.height, w = phantom.width;
  const std::size_t plane = static_cast<std::size_t>(h) * w;

  // Modality B volume-level appearance: bias polynomial and gamma.
  std::array<double, 6> coef{};
  double gamma = 1.0, bias_scale = 0.0;
  if (modality == Modality::B) {
    RngStream vol = rng.child("volume");
    for (auto& c : coef) c = vol.uniform(-1.0, 1.0);
    gamma = vol.uniform(0.7, 1.4);
    double peak = 0.0;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double u = 2.0 * (x + 0.5) / w - 1.0, v = 2.0 * (y + 0.5) / h - 1.0;
        const double p = coef[0] * u + coef[1] * v + coef[2] * u * v + coef[3] * u * u + coef[4] * v * v + coef[5] * u * u * v;
        peak = std::max(peak, std::abs(p));
      }
    }
    bias_scale = peak > 0.0 ? 0.3 / peak : 0.0;
  }
  const double sigma = modality == Modality::A ? 0.02 : 0.03;

  std::vector<SliceSample> out;
  out.reserve(static_cast<std::size_t>(phantom.slices));
  RngStream noise = rng.child("noise");
  for (int s = 0; s < phantom.slices; ++s) {
    std::vector<float> img(plane), msk(plane);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * w + x;
        const std::uint8_t lab = phantom.label(s, y, x);
        double v = modality_intensity(modality, lab);
        if (modality == Modality::B) {
          const double u = 2.0 * (x + 0.5) / w - 1.0, q = 2.0 * (y + 0.5) / h - 1.0;
          const double p = coef[0] * u + coef[1] * q + coef[2] * u * q + coef[3] * u * u + coef[4] * q * q + coef[5] * u * u * q;
          v = std::clamp(v * (1.0 + bias_scale * p), 0.0, 1.0);
          v = std::pow(v, gamma);
        }
        const double n = noise.normal();
        if (options.noise) v += sigma * n;
        img[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        msk[i] = lab == tissue::kOrgan ? 1.0f : 0.0f;
      }
    }
    SliceSample sample;
    sample.image = Tensor::from_data({1, h, w}, std::move(img));
    sample.mask = Tensor::from_data({1, h, w}, std::move(msk));
    sample.volume_id = phantom.volume_id;
    sample.slice_index = s;
    sample.modality = modality;
    out.push_back(std::move(sample));
  }
  return out;
}

// --- slice files ------------------------------------------------------------

namespace {
constexpr std::array<char, 4> kSliceMagic{'F', 'G', 'S', 'L'};

void put_u16(std::vector<std::uint8_t>& b, std::uint16_t v) {
  b.push_back(static_cast<std::uint8_t>(v & 0xFF));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
}
}  // namespace

std::vector<std::uint8_t> encode_slice(SliceKind kind, const Tensor& plane) {
  if (plane.ndim() != 3 || plane.dim(0) != 1) {
    throw ShapeError("encode_slice: expected [1,H,W], got " + shape_str(plane.shape()));
  }
  const auto h = plane.dim(1), w = plane.dim(2);
  if (h > 0xFFFF || w > 0xFFFF) throw ShapeError("encode_slice: plane too large for u16 dimensions");
  std::vector<std::uint8_t> b;
  b.reserve(kSliceHeaderSize + static_cast<std::size_t>(h * w) * 4);
  b.insert(b.end(), kSliceMagic.begin(), kSliceMagic.end());
  b.push_back(kSliceFormatVersion);
  b.push_back(static_cast<std::uint8_t>(kind));
  put_u16(b, static_cast<std::uint16_t>(h));
  put_u16(b, static_cast<std::uint16_t>(w));
  b.insert(b.end(), 6, 0);
  for (float f : plane.data()) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    for (int k = 0; k < 4; ++k) b.push_back(static_cast<std::uint8_t>(u >> (8 * k)));
  }
  return b;
}

Tensor decode_slice(std::span<const std::uint8_t> bytes, SliceKind expected_kind) {
  if (bytes.size() < kSliceHeaderSize) throw std::runtime_error("slice file: truncated header");
  if (!std::equal(kSliceMagic.begin(), kSliceMagic.end(), bytes.begin())) {
    throw std::runtime_error("slice file: bad magic");
  }
  if (bytes[4] != kSliceFormatVersion) throw std::runtime_error("slice file: unsupported version " + std::to_string(bytes[4]));
  if (bytes[5] != static_cast<std::uint8_t>(expected_kind)) throw std::runtime_error("slice file: unexpected kind");
  const std::int64_t h = bytes[6] | (bytes[7] << 8);
  const std::int64_t w = bytes[8] | (bytes[9] << 8);
  const std::size_t n = static_cast<std::size_t>(h * w);
  if (bytes.size() != kSliceHeaderSize + 4 * n) throw std::runtime_error("slice file: payload size mismatch");
  std::vector<float> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto* p = bytes.data() + kSliceHeaderSize + 4 * i;
    const std::uint32_t u = p[0] | (p[1] << 8) | (p[2] << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
    std::memcpy(&data[i], &u, 4);
  }
  return Tensor::from_data({1, h, w}, std::move(data));
}

void write_slice_file(const fs::path& path, SliceKind kind, const Tensor& plane) {
  auto bytes = encode_slice(kind, plane);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write slice file " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("failed writing slice file " + path.string());
}

Tensor read_slice_file(const fs::path& path, SliceKind expected_kind) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open slice file " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return decode_slice(bytes, expected_kind);
  } catch (const std::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

// --- dataset ----------------------------------------------------------------

DatasetConfig DatasetConfig::desk_default() {
  DatasetConfig c;
  for (Modality m : {Modality::A, Modality::B}) {
    c.splits.push_back({m, Split::Train, 20, std::nullopt});
    c.splits.push_back({m, Split::Val, 5, std::nullopt});
    c.splits.push_back({m, Split::Test, 10, std::nullopt});
  }
  return c;
}

std::vector<const VolumeRecord*> DatasetManifest::select(Modality m, Split s) const {
  std::vector<const VolumeRecord*> out;
  for (const auto& v : volumes)
    if (v.modality == m && v.split == s) out.push_back(&v);
  return out;
}

namespace {

std::string volume_name(Modality m, int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%04d", to_string(m).c_str(), index);
  return buf;
}

std::string slice_name(int s, const char* kind) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "slice_%03d.%s.fgsl", s, kind);
  return buf;
}

std::uint64_t volume_seed(std::uint64_t master, Modality m, int index, std::string_view purpose) {
  return RngStream(master).child(to_string(m)).child(static_cast<std::uint64_t>(index)).child(purpose).next_u64();
}

void write_volume(const DatasetManifest& manifest, const VolumeRecord& r, const fs::path& out_dir) {
  const auto& c = manifest.config;
  Phantom ph = generate_phantom(r.phantom_seed, c.height, c.width, c.slices);
  ph.volume_id = r.volume_id;
  auto samples = render_modality(ph, r.modality, r.render_seed);
  fs::create_directories(out_dir / "volumes" / r.volume_id);
  for (std::size_t s = 0; s < samples.size(); ++s) {
    write_slice_file(out_dir / r.image_files[s], SliceKind::Image, samples[s].image);
    write_slice_file(out_dir / r.mask_files[s], SliceKind::Mask, samples[s].mask);
  }
}

}  // namespace

DatasetManifest build_dataset(const DatasetConfig& config, const fs::path& out_dir) {
  const int levels_ok = config.height % 2 == 0 && config.width % 2 == 0;
  if (!levels_ok) throw std::invalid_argument("build_dataset: H and W must be even");
  DatasetManifest m;
  m.config = config;
  m.root = out_dir;

  // Assign phantom index ranges and reject overlaps within a modality.
  std::map<Modality, int> next;
  std::map<Modality, std::map<int, std::string>> used;
  std::set<std::pair<Modality, Split>> seen_requests;
  for (const auto& req : config.splits) {
    if (req.count < 0) throw std::invalid_argument("build_dataset: negative volume count");
    if (!seen_requests.insert({req.modality, req.split}).second) {
      throw std::invalid_argument("build_dataset: split " + to_string(req.split) + " of modality " +
                                  to_string(req.modality) + " requested twice");
    }
    const int first = req.first_index.value_or(next[req.modality]);
    for (int k = 0; k < req.count; ++k) {
      const int idx = first + k;
      auto [it, inserted] = used[req.modality].emplace(idx, to_string(req.split));
      if (!inserted) {
        throw std::invalid_argument("build_dataset: overlapping split requests: modality " + to_string(req.modality) +
                                    " volume index " + std::to_string(idx) + " requested by both " + it->second +
                                    " and " + to_string(req.split));
      }
      VolumeRecord r;
      r.modality = req.modality;
      r.split = req.split;
      r.phantom_index = idx;
      r.volume_id = volume_name(req.modality, idx);
      r.slices = config.slices;
      r.phantom_seed = volume_seed(config.seed, req.modality, idx, "phantom");
      r.render_seed = volume_seed(config.seed, req.modality, idx, "render");
      for (int s = 0; s < config.slices; ++s) {
        r.image_files.push_back((fs::path("volumes") / r.volume_id / slice_name(s, "image")).generic_string());
        r.mask_files.push_back((fs::path("volumes") / r.volume_id / slice_name(s, "mask")).generic_string());
      }
      m.volumes.push_back(std::move(r));
    }
    next[req.modality] = std::max(next[req.modality], first + req.count);
  }

  fs::create_directories(out_dir);
  for (const auto& r : m.volumes) write_volume(m, r, out_dir);
  save_manifest(m, out_dir / "manifest.json");
  return m;
}

void regenerate_volume(const DatasetManifest& manifest, const VolumeRecord& record, const fs::path& out_dir) {
  write_volume(manifest, record, out_dir);
}

void save_manifest(const DatasetManifest& m, const fs::path& path) {
  json j;
  j["format"] = "fedgin-dataset-manifest";
  j["version"] = m.version;
  const auto& c = m.config;
  json splits = json::array();
  for (const auto& s : c.splits) {
    json e{{"modality", to_string(s.modality)}, {"split", to_string(s.split)}, {"count", s.count}};
    if (s.first_index) e["first_index"] = *s.first_index;
    splits.push_back(e);
  }
  j["generation"] = {{"height", c.height}, {"width", c.width},   {"slices", c.slices},
                     {"seed", c.seed},     {"organ", c.organ},   {"splits", splits}};
  json vols = json::array();
  for (const auto& v : m.volumes) {
    vols.push_back({{"volume_id", v.volume_id},
                    {"modality", to_string(v.modality)},
                    {"split", to_string(v.split)},
                    {"phantom_index", v.phantom_index},
                    {"slices", v.slices},
                    {"phantom_seed", v.phantom_seed},
                    {"render_seed", v.render_seed},
                    {"image_files", v.image_files},
                    {"mask_files", v.mask_files}});
  }
  j["volumes"] = vols;
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write manifest " + path.string());
  f << j.dump(2) << '\n';
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open manifest " + path.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw std::runtime_error("manifest " + path.string() + " is not valid JSON: " + e.what());
  }
  if (j.value("format", "") != "fedgin-dataset-manifest") throw std::runtime_error("manifest: unexpected format tag");
  DatasetManifest m;
  m.version = j.at("version").get<int>();
  if (m.version != kManifestVersion) throw std::runtime_error("manifest: unsupported version " + std::to_string(m.version));
  const auto& g = j.at("generation");
  m.config.height = g.at("height");
  m.config.width = g.at("width");
  m.config.slices = g.at("slices");
  m.config.seed = g.at("seed");
  m.config.organ = g.value("organ", "organ");
  for (const auto& s : g.at("splits")) {
    SplitRequest r{parse_modality(s.at("modality")), parse_split(s.at("split")), s.at("count"), std::nullopt};
    if (s.contains("first_index")) r.first_index = s.at("first_index").get<int>();
    m.config.splits.push_back(r);
  }
  for (const auto& v : j.at("volumes")) {
    VolumeRecord r;
    r.volume_id = v.at("volume_id");
    r.modality = parse_modality(v.at("modality"));
    r.split = parse_split(v.at("split"));
    r.phantom_index = v.at("phantom_index");
    r.slices = v.at("slices");
    r.phantom_seed = v.at("phantom_seed");
    r.render_seed = v.at("render_seed");
    r.image_files = v.at("image_files").get<std::vector<std::string>>();
    r.mask_files = v.at("mask_files").get<std::vector<std::string>>();
    m.volumes.push_back(std::move(r));
  }
  m.root = path.parent_path();
  return m;
}

Volume load_volume(const DatasetManifest& manifest, const VolumeRecord& r) {
  Volume v;
  v.volume_id = r.volume_id;
  v.modality = r.modality;
  v.split = r.split;
  for (std::size_t s = 0; s < r.image_files.size(); ++s) {
    SliceSample sample;
    sample.image = read_slice_file(manifest.root / r.image_files[s], SliceKind::Image);
    sample.mask = read_slice_file(manifest.root / r.mask_files[s], SliceKind::Mask);
    sample.volume_id = r.volume_id;
    sample.slice_index = static_cast<int>(s);
    sample.modality = r.modality;
    v.slices.push_back(std::move(sample));
  }
  return v;
}

std::vector<Volume> load_volumes(const DatasetManifest& manifest, Modality m, Split s, std::optional<int> limit) {
  std::vector<Volume> out;
  for (const VolumeRecord* r : manifest.select(m, s)) {
    if (limit && static_cast<int>(out.size()) >= *limit) break;
    out.push_back(load_volume(manifest, *r));
  }
  return out;
}

}  // namespace fedgin
