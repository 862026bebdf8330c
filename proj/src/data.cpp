#include "dupl/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "dupl/error.hpp"

namespace dupl {

void DatasetSpec::validate() const {
  if (num_classes < 2 || num_classes > 8) {
    throw ConfigError("dataset: number of classes must be between 2 and 8");
  }
  if (n_train < 0 || n_val < 0 || height < 16 || width < 16) {
    throw ConfigError("dataset: bad sizes");
  }
}

namespace {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9E3779B97F4A7C15ULL + b + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

constexpr std::array<std::array<float, 3>, 8> kFamilyColor{{
    {0.85f, 0.15f, 0.15f},  // red circle
    {0.15f, 0.75f, 0.20f},  // green square
    {0.15f, 0.25f, 0.85f},  // blue triangle
    {0.90f, 0.85f, 0.15f},  // yellow cross
    {0.80f, 0.20f, 0.80f},  // magenta diamond
    {0.15f, 0.80f, 0.80f},  // cyan horizontal bar
    {0.95f, 0.55f, 0.10f},  // orange vertical bar
    {0.50f, 0.20f, 0.70f},  // purple hexagon
}};

bool shape_contains(int shape, double dx, double dy, double r) {
  const double ax = std::abs(dx), ay = std::abs(dy);
  switch (shape) {
    case 0: return dx * dx + dy * dy <= r * r;
    case 1: return ax <= 0.8 * r && ay <= 0.8 * r;
    case 2: return dy >= -r && dy <= 0.7 * r && ax <= (dy + r) * 0.6;
    case 3: return (ax <= 0.3 * r && ay <= r) || (ay <= 0.3 * r && ax <= r);
    case 4: return ax + ay <= r;
    case 5: return ax <= r && ay <= 0.45 * r;
    case 6: return ax <= 0.45 * r && ay <= r;
    default: return ay <= 0.87 * r && ax + 0.577 * ay <= r;
  }
}

// Low-frequency field: a (g x g) random grid, bilinearly stretched.
std::vector<float> smooth_field(std::mt19937_64& rng, int h, int w, int grid,
                                float amplitude) {
  std::uniform_real_distribution<float> u(-amplitude, amplitude);
  std::vector<float> knots(static_cast<std::size_t>(grid) * grid);
  for (float& k : knots) k = u(rng);
  std::vector<float> field(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y) {
    const float gy = static_cast<float>(y) * (grid - 1) / std::max(1, h - 1);
    const int y0 = std::min(static_cast<int>(gy), grid - 2);
    const float fy = gy - y0;
    for (int x = 0; x < w; ++x) {
      const float gx = static_cast<float>(x) * (grid - 1) / std::max(1, w - 1);
      const int x0 = std::min(static_cast<int>(gx), grid - 2);
      const float fx = gx - x0;
      const float a = knots[y0 * grid + x0], b = knots[y0 * grid + x0 + 1];
      const float c = knots[(y0 + 1) * grid + x0], d = knots[(y0 + 1) * grid + x0 + 1];
      field[static_cast<std::size_t>(y) * w + x] =
          (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d);
    }
  }
  return field;
}

float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// Reads the next whitespace-delimited header token, skipping comments.
std::string pnm_token(std::istream& is) {
  std::string tok;
  int ch;
  while ((ch = is.get()) != EOF) {
    if (ch == '#') {
      while ((ch = is.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  return tok;
}

struct PnmHeader {
  int width, height, maxval;
};

PnmHeader read_pnm_header(std::istream& is, const std::string& magic,
                          const std::filesystem::path& path) {
  if (pnm_token(is) != magic) throw DataError("not a " + magic + " file: " + path.string());
  PnmHeader h{};
  try {
    h.width = std::stoi(pnm_token(is));
    h.height = std::stoi(pnm_token(is));
    h.maxval = std::stoi(pnm_token(is));
  } catch (const std::exception&) {
    throw DataError("malformed PNM header: " + path.string());
  }
  if (h.width <= 0 || h.height <= 0 || h.maxval != 255) {
    throw DataError("unsupported PNM geometry/maxval: " + path.string());
  }
  return h;
}

struct Sampling {
  int src_h, src_w, scaled_h, scaled_w;
};

Sampling sampling_of(const AugmentRecord& r) {
  return {r.height, r.width,
          std::max(1, static_cast<int>(std::lround(r.height * r.scale))),
          std::max(1, static_cast<int>(std::lround(r.width * r.scale)))};
}

// Nearest source pixel for output (y, x), or false when out of view.
bool nearest_source(const AugmentRecord& r, const Sampling& s, int y, int x,
                    int& sy, int& sx) {
  const int ys = y + r.crop_y, xs = x + r.crop_x;
  if (ys < 0 || xs < 0 || ys >= s.scaled_h || xs >= s.scaled_w) return false;
  sy = std::min(static_cast<int>((ys + 0.5) * s.src_h / s.scaled_h), s.src_h - 1);
  sx = std::min(static_cast<int>((xs + 0.5) * s.src_w / s.scaled_w), s.src_w - 1);
  if (r.hflip) sx = s.src_w - 1 - sx;
  return true;
}

template <typename Map, typename Value>
Map replay(const AugmentRecord& r, const Map& in, Map out,
           std::vector<Value> Map::*field) {
  const Sampling s = sampling_of(r);
  for (int y = 0; y < r.height; ++y) {
    for (int x = 0; x < r.width; ++x) {
      int sy, sx;
      if (nearest_source(r, s, y, x, sy, sx)) {
        (out.*field)[static_cast<std::size_t>(y) * r.width + x] =
            (in.*field)[static_cast<std::size_t>(sy) * in.width + sx];
      }
    }
  }
  return out;
}

AugmentRecord random_crop(AugmentRecord r, std::mt19937_64& rng) {
  const Sampling s = sampling_of(r);
  auto offset = [&rng](int scaled, int target) {
    const int lo = std::min(0, scaled - target), hi = std::max(0, scaled - target);
    return std::uniform_int_distribution<int>(lo, hi)(rng);
  };
  r.crop_y = offset(s.scaled_h, r.height);
  r.crop_x = offset(s.scaled_w, r.width);
  return r;
}

}  // namespace

std::vector<std::uint8_t> labels_from_mask(const LabelMap& mask, int num_classes) {
  std::vector<std::uint8_t> bits(static_cast<std::size_t>(num_classes), 0);
  for (auto v : mask.labels) {
    if (v >= 1 && v <= num_classes) bits[v - 1] = 1;
  }
  return bits;
}

std::string label_bits_string(const std::vector<std::uint8_t>& bits) {
  std::string s;
  for (auto b : bits) s.push_back(b ? '1' : '0');
  return s;
}

SynthSample generate_sample(const DatasetSpec& spec, int index) {
  spec.validate();
  const int h = spec.height, w = spec.width;
  const double unit = std::min(h, w) / 64.0;
  std::mt19937_64 rng(mix_seed(spec.seed, static_cast<std::uint64_t>(index)));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uniform = [&](double a, double b) { return a + (b - a) * u01(rng); };
  const bool train = index < spec.n_train;
  char id[32];
  std::snprintf(id, sizeof id, "%s_%05d", train ? "train" : "val",
                train ? index : index - spec.n_train);

  // Class shapes must keep a visible pixel inside this box so a crop of up
  // to 20% per side never removes a class.
  const int box_lo_y = static_cast<int>(0.2 * h), box_hi_y = h - box_lo_y;
  const int box_lo_x = static_cast<int>(0.2 * w), box_hi_x = w - box_lo_x;

  for (int attempt = 0;; ++attempt) {
    SynthSample s;
    s.id = id;
    s.image = Image(3, h, w);
    s.gt_mask = LabelMap(h, w, kBackgroundLabel);

    const auto lum = smooth_field(rng, h, w, 5, 0.15f);
    const double base = uniform(0.35, 0.6);
    for (int c = 0; c < 3; ++c) {
      const auto tint = smooth_field(rng, h, w, 4, 0.04f);
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const std::size_t p = static_cast<std::size_t>(y) * w + x;
          s.image.at(c, y, x) = clamp01(base + lum[p] + tint[p]);
        }
      }
    }

    const int n_distract = 1 + static_cast<int>(u01(rng) * 3) % 3;
    for (int d = 0; d < n_distract; ++d) {
      const double cy = uniform(0, h), cx = uniform(0, w);
      const double ry = uniform(3, 9) * unit, rx = uniform(3, 9) * unit;
      const double gray = uniform(0.15, 0.85);
      std::array<double, 3> col;
      for (auto& v : col) v = gray + uniform(-0.06, 0.06);
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const double ny = (y - cy) / ry, nx = (x - cx) / rx;
          if (ny * ny + nx * nx <= 1.0) {
            for (int c = 0; c < 3; ++c) s.image.at(c, y, x) = clamp01(col[c]);
          }
        }
      }
    }

    std::vector<int> classes(static_cast<std::size_t>(spec.num_classes));
    for (int c = 0; c < spec.num_classes; ++c) classes[static_cast<std::size_t>(c)] = c;
    std::shuffle(classes.begin(), classes.end(), rng);
    const int n_obj = 1 + static_cast<int>(u01(rng) * std::min(3, spec.num_classes));
    for (int k = 0; k < n_obj; ++k) {
      const int cls = classes[static_cast<std::size_t>(k)];
      const double r = uniform(9, 15) * unit;
      const double cy = uniform(0.22 * h, 0.78 * h), cx = uniform(0.22 * w, 0.78 * w);
      std::array<double, 3> col;
      for (int c = 0; c < 3; ++c) {
        col[static_cast<std::size_t>(c)] =
            kFamilyColor[static_cast<std::size_t>(cls % 8)][static_cast<std::size_t>(c)] +
            uniform(-0.08, 0.08);
      }
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          if (!shape_contains(cls % 8, x + 0.5 - cx, y + 0.5 - cy, r)) continue;
          for (int c = 0; c < 3; ++c) {
            s.image.at(c, y, x) = clamp01(col[static_cast<std::size_t>(c)] + uniform(-0.03, 0.03));
          }
          s.gt_mask.at(y, x) = static_cast<std::uint8_t>(cls + 1);
        }
      }
    }

    s.image_label = labels_from_mask(s.gt_mask, spec.num_classes);
    std::vector<std::uint8_t> in_box(static_cast<std::size_t>(spec.num_classes), 0);
    for (int y = box_lo_y; y < box_hi_y; ++y) {
      for (int x = box_lo_x; x < box_hi_x; ++x) {
        const auto v = s.gt_mask.at(y, x);
        if (v >= 1) in_box[v - 1] = 1;
      }
    }
    if (in_box == s.image_label || attempt >= 64) return s;
  }
}

void write_ppm(const std::filesystem::path& path, const Image& image) {
  if (image.channels != 3) throw ConfigError("write_ppm: need 3 channels");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  std::vector<unsigned char> bytes(static_cast<std::size_t>(image.height) * image.width * 3);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        bytes[(static_cast<std::size_t>(y) * image.width + x) * 3 + c] =
            static_cast<unsigned char>(std::lround(std::clamp(image.at(c, y, x), 0.0f, 1.0f) * 255.0f));
      }
    }
  }
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("failed writing " + path.string());
}

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  const PnmHeader hdr = read_pnm_header(is, "P6", path);
  std::vector<unsigned char> bytes(static_cast<std::size_t>(hdr.width) * hdr.height * 3);
  if (!is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()))) {
    throw DataError("truncated PPM: " + path.string());
  }
  Image img(3, hdr.height, hdr.width);
  for (int y = 0; y < hdr.height; ++y) {
    for (int x = 0; x < hdr.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        img.at(c, y, x) = bytes[(static_cast<std::size_t>(y) * hdr.width + x) * 3 + c] / 255.0f;
      }
    }
  }
  return img;
}

void write_pgm(const std::filesystem::path& path, const LabelMap& map) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << "P5\n" << map.width << ' ' << map.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(map.labels.data()),
           static_cast<std::streamsize>(map.labels.size()));
  if (!os) throw IoError("failed writing " + path.string());
}

LabelMap read_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  const PnmHeader hdr = read_pnm_header(is, "P5", path);
  LabelMap map(hdr.height, hdr.width);
  if (!is.read(reinterpret_cast<char*>(map.labels.data()),
               static_cast<std::streamsize>(map.labels.size()))) {
    throw DataError("truncated PGM: " + path.string());
  }
  return map;
}

void write_manifest(const std::filesystem::path& root,
                    const std::vector<ManifestRow>& rows) {
  std::ofstream os(root / "manifest.csv", std::ios::trunc);
  if (!os) throw IoError("cannot write manifest in " + root.string());
  os << "id,split,image_path,mask_path,label_bits\n";
  for (const auto& r : rows) {
    os << r.id << ',' << r.split << ',' << r.image_path << ',' << r.mask_path
       << ',' << r.label_bits << '\n';
  }
  if (!os) throw IoError("failed writing manifest in " + root.string());
}

std::vector<ManifestRow> read_manifest(const std::filesystem::path& root) {
  std::ifstream is(root / "manifest.csv");
  if (!is) throw IoError("cannot open manifest in " + root.string());
  std::vector<ManifestRow> rows;
  std::string line;
  std::getline(is, line);
  if (trim(line) != "id,split,image_path,mask_path,label_bits") {
    throw DataError("unexpected manifest header in " + root.string());
  }
  while (std::getline(is, line)) {
    if (trim(line).empty()) continue;
    std::stringstream ss(trim(line));
    ManifestRow r;
    if (!std::getline(ss, r.id, ',') || !std::getline(ss, r.split, ',') ||
        !std::getline(ss, r.image_path, ',') || !std::getline(ss, r.mask_path, ',') ||
        !std::getline(ss, r.label_bits)) {
      throw DataError("malformed manifest row: " + line);
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<ManifestRow> generate_dataset(const DatasetSpec& spec,
                                          const std::filesystem::path& out_dir) {
  spec.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  std::filesystem::create_directories(out_dir / "masks", ec);
  if (ec || !std::filesystem::is_directory(out_dir / "images")) {
    throw IoError("cannot create dataset directory " + out_dir.string());
  }
  std::vector<ManifestRow> rows;
  const int total = spec.n_train + spec.n_val;
  for (int i = 0; i < total; ++i) {
    const bool train = i < spec.n_train;
    const SynthSample s = generate_sample(spec, i);
    ManifestRow r{s.id, train ? "train" : "val", "images/" + s.id + ".ppm",
                  "masks/" + s.id + ".pgm", label_bits_string(s.image_label)};
    write_ppm(out_dir / r.image_path, s.image);
    write_pgm(out_dir / r.mask_path, s.gt_mask);
    rows.push_back(std::move(r));
  }
  write_manifest(out_dir, rows);
  return rows;
}

std::vector<SynthSample> load_split(const std::filesystem::path& root,
                                    const std::string& split) {
  std::vector<SynthSample> out;
  for (const auto& r : read_manifest(root)) {
    if (r.split != split) continue;
    SynthSample s;
    s.id = r.id;
    s.image = read_ppm(root / r.image_path);
    s.gt_mask = read_pgm(root / r.mask_path);
    if (s.gt_mask.height != s.image.height || s.gt_mask.width != s.image.width) {
      throw DataError("image/mask size mismatch for " + r.id);
    }
    for (char ch : r.label_bits) {
      if (ch != '0' && ch != '1') throw DataError("bad label bits for " + r.id);
      s.image_label.push_back(ch == '1' ? 1 : 0);
    }
    out.push_back(std::move(s));
  }
  return out;
}

AugmentRecord AugmentRecord::identity(int h, int w) {
  AugmentRecord r;
  r.height = h;
  r.width = w;
  return r;
}

bool AugmentRecord::spatial_identity() const {
  return !hflip && scale == 1.0 && crop_y == 0 && crop_x == 0;
}

Image apply_spatial(const AugmentRecord& r, const Image& image) {
  if (image.height != r.height || image.width != r.width) {
    throw ConfigError("apply_spatial: record/image size mismatch");
  }
  const Sampling s = sampling_of(r);
  Image out(image.channels, r.height, r.width, 0.0f);
  for (int y = 0; y < r.height; ++y) {
    const int ys = y + r.crop_y;
    if (ys < 0 || ys >= s.scaled_h) continue;
    const double fy = std::clamp((ys + 0.5) * s.src_h / s.scaled_h - 0.5, 0.0,
                                 static_cast<double>(s.src_h - 1));
    const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, s.src_h - 1);
    const double wy = fy - y0;
    for (int x = 0; x < r.width; ++x) {
      const int xs = x + r.crop_x;
      if (xs < 0 || xs >= s.scaled_w) continue;
      double fx = std::clamp((xs + 0.5) * s.src_w / s.scaled_w - 0.5, 0.0,
                             static_cast<double>(s.src_w - 1));
      if (r.hflip) fx = (s.src_w - 1) - fx;
      const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, s.src_w - 1);
      const double wx = fx - x0;
      for (int c = 0; c < image.channels; ++c) {
        const double top = (1 - wx) * image.at(c, y0, x0) + wx * image.at(c, y0, x1);
        const double bot = (1 - wx) * image.at(c, y1, x0) + wx * image.at(c, y1, x1);
        out.at(c, y, x) = static_cast<float>((1 - wy) * top + wy * bot);
      }
    }
  }
  return out;
}

Image apply_color(const AugmentRecord& r, const Image& image) {
  Image out = image;
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      double px[3] = {image.at(0, y, x), image.at(1, y, x), image.at(2, y, x)};
      if (r.grayscale) {
        const double g = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
        px[0] = px[1] = px[2] = g;
      }
      for (int c = 0; c < 3; ++c) {
        out.at(c, y, x) = clamp01(r.gain[static_cast<std::size_t>(c)] * px[c] +
                                  r.bias[static_cast<std::size_t>(c)]);
      }
    }
  }
  return out;
}

LabelMap replay_spatial(const AugmentRecord& r, const LabelMap& map) {
  if (map.height != r.height || map.width != r.width) {
    throw ConfigError("replay_spatial: record/map size mismatch");
  }
  return replay(r, map, LabelMap(r.height, r.width, kIgnoreLabel), &LabelMap::labels);
}

NoiseMask replay_spatial(const AugmentRecord& r, const NoiseMask& mask) {
  if (mask.height != r.height || mask.width != r.width) {
    throw ConfigError("replay_spatial: record/mask size mismatch");
  }
  return replay(r, mask, NoiseMask(r.height, r.width), &NoiseMask::mask);
}

WeakView weak_augment(const SynthSample& sample, std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed, 0x5745414BULL));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  AugmentRecord r = AugmentRecord::identity(sample.image.height, sample.image.width);
  r.hflip = u01(rng) < 0.5;
  r.scale = 0.8 + 0.45 * u01(rng);
  r = random_crop(r, rng);
  for (int c = 0; c < 3; ++c) {
    r.gain[static_cast<std::size_t>(c)] = 0.9 + 0.2 * u01(rng);
    r.bias[static_cast<std::size_t>(c)] = -0.05 + 0.1 * u01(rng);
  }
  WeakView v;
  v.image = apply_color(r, apply_spatial(r, sample.image));
  v.gt_mask = replay_spatial(r, sample.gt_mask);
  v.record = r;
  return v;
}

std::pair<Image, AugmentRecord> strong_augment(const Image& image, std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed, 0x5354524FULL));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  AugmentRecord r = AugmentRecord::identity(image.height, image.width);
  for (int c = 0; c < 3; ++c) {
    r.gain[static_cast<std::size_t>(c)] = 0.6 + 0.8 * u01(rng);
    r.bias[static_cast<std::size_t>(c)] = -0.2 + 0.4 * u01(rng);
  }
  r.grayscale = u01(rng) < 0.2;
  r.hflip = u01(rng) < 0.5;
  constexpr double kScales[3] = {0.75, 1.0, 1.25};
  r.scale = kScales[std::uniform_int_distribution<int>(0, 2)(rng)];
  r = random_crop(r, rng);
  return {apply_color(r, apply_spatial(r, image)), r};
}

}  // namespace dupl
