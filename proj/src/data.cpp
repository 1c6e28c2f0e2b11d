#include "mintnet/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include "mintnet/errors.hpp"

namespace mintnet::data {

Tensor4 Dataset::take(const std::vector<std::size_t>& indices) const {
  const Shape4& s = images.shape();
  const std::size_t per = s.per_item();
  Tensor4 out({indices.size(), s.c, s.h, s.w});
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= s.n) {
      throw std::out_of_range("dataset index " + std::to_string(indices[k]) + " >= " + std::to_string(s.n));
    }
    std::copy_n(images.data().begin() + static_cast<std::ptrdiff_t>(indices[k] * per), per,
                out.data().begin() + static_cast<std::ptrdiff_t>(k * per));
  }
  return out;
}

namespace {

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

class BigEndianReader {
 public:
  BigEndianReader(const std::vector<unsigned char>& bytes, std::string path)
      : bytes_(bytes), path_(std::move(path)) {}

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | bytes_[pos_++];
    return v;
  }
  const unsigned char* block(std::size_t n, const char* what) {
    need(n, what);
    const unsigned char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw IdxError(IdxError::Kind::kTruncated, path_ + ": truncated while reading " + what + " (have " +
                                                     std::to_string(bytes_.size() - pos_) + " bytes, need " +
                                                     std::to_string(n) + ")");
    }
  }

  const std::vector<unsigned char>& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

std::string hex(std::uint32_t v) {
  std::ostringstream os;
  os << "0x" << std::hex;
  os.width(8);
  os.fill('0');
  os << v;
  return os.str();
}

void put_u32(std::ofstream& out, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                              static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(b.data(), 4);
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::optional<std::string>& labels_path) {
  const std::vector<unsigned char> bytes = read_file(images_path);
  BigEndianReader rd(bytes, images_path);
  const std::uint32_t magic = rd.u32("magic");
  if (magic != kIdxImagesMagic) {
    throw IdxError(IdxError::Kind::kBadMagic, images_path + ": bad IDX image magic " + hex(magic) +
                                                  " (expected " + hex(kIdxImagesMagic) + ")");
  }
  const std::size_t n = rd.u32("image count"), h = rd.u32("rows"), w = rd.u32("columns");
  const unsigned char* px = rd.block(n * h * w, "pixels");
  Dataset ds;
  ds.source = "idx:" + images_path;
  ds.images = Tensor4({n, 1, h, w});
  for (std::size_t i = 0; i < n * h * w; ++i) ds.images[i] = px[i];

  if (labels_path) {
    const std::vector<unsigned char> lb = read_file(*labels_path);
    BigEndianReader lr(lb, *labels_path);
    const std::uint32_t lm = lr.u32("magic");
    if (lm != kIdxLabelsMagic) {
      throw IdxError(IdxError::Kind::kBadMagic, *labels_path + ": bad IDX label magic " + hex(lm) +
                                                    " (expected " + hex(kIdxLabelsMagic) + ")");
    }
    const std::size_t count = lr.u32("label count");
    if (count != n) {
      throw IdxError(IdxError::Kind::kDimMismatch, *labels_path + ": " + std::to_string(count) +
                                                       " labels for " + std::to_string(n) + " images");
    }
    const unsigned char* l = lr.block(count, "labels");
    ds.labels.assign(l, l + count);
  }
  return ds;
}

void write_idx(const Dataset& ds, const std::string& images_path, const std::optional<std::string>& labels_path) {
  const Shape4& s = ds.images.shape();
  if (s.c != 1) throw ShapeError("IDX images must have one channel, got " + s.str());
  std::ofstream out(images_path, std::ios::binary);
  if (!out) throw IoError("cannot write " + images_path);
  put_u32(out, kIdxImagesMagic);
  put_u32(out, static_cast<std::uint32_t>(s.n));
  put_u32(out, static_cast<std::uint32_t>(s.h));
  put_u32(out, static_cast<std::uint32_t>(s.w));
  std::vector<char> px(ds.images.size());
  for (std::size_t i = 0; i < px.size(); ++i) {
    px[i] = static_cast<char>(static_cast<unsigned char>(std::clamp(ds.images[i], 0.0, 255.0)));
  }
  out.write(px.data(), static_cast<std::streamsize>(px.size()));
  if (!out) throw IoError("failed writing " + images_path);
  if (labels_path) {
    std::ofstream lo(*labels_path, std::ios::binary);
    if (!lo) throw IoError("cannot write " + *labels_path);
    put_u32(lo, kIdxLabelsMagic);
    put_u32(lo, static_cast<std::uint32_t>(ds.labels.size()));
    lo.write(reinterpret_cast<const char*>(ds.labels.data()), static_cast<std::streamsize>(ds.labels.size()));
  }
}

Dataset downsample(const Dataset& ds, std::size_t factor) {
  const Shape4& s = ds.images.shape();
  if (factor == 0 || s.h % factor != 0 || s.w % factor != 0) {
    throw ShapeError("downsample factor " + std::to_string(factor) + " does not divide " + s.str());
  }
  Dataset out = ds;
  out.images = Tensor4({s.n, s.c, s.h / factor, s.w / factor});
  const double area = static_cast<double>(factor * factor);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t y = 0; y < s.h / factor; ++y)
        for (std::size_t x = 0; x < s.w / factor; ++x) {
          double acc = 0.0;
          for (std::size_t dy = 0; dy < factor; ++dy)
            for (std::size_t dx = 0; dx < factor; ++dx) acc += ds.images(n, c, y * factor + dy, x * factor + dx);
          out.images(n, c, y, x) = std::floor(acc / area + 0.5);
        }
  return out;
}

Dataset synth_bars(std::size_t n, std::size_t size, std::mt19937_64& rng) {
  if (size < 4) throw ShapeError("synth_bars needs size >= 4");
  Dataset ds;
  ds.source = "synth:bars";
  ds.images = Tensor4({n, 1, size, size});
  std::uniform_int_distribution<int> bar_count(1, 3);
  std::uniform_int_distribution<std::size_t> position(0, size - 1);
  std::uniform_int_distribution<int> orientation(0, 1);
  std::uniform_real_distribution<double> bright(200.0, 250.0);
  std::uniform_real_distribution<double> dark(10.0, 30.0);
  std::normal_distribution<double> noise(0.0, 4.0);
  for (std::size_t k = 0; k < n; ++k) {
    const double bg = dark(rng);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) ds.images(k, 0, y, x) = bg;
    const int bars = bar_count(rng);
    for (int b = 0; b < bars; ++b) {
      const bool horizontal = orientation(rng) == 0;
      const std::size_t at = position(rng);
      const double level = bright(rng);
      for (std::size_t i = 0; i < size; ++i) {
        if (horizontal) {
          ds.images(k, 0, at, i) = level;
        } else {
          ds.images(k, 0, i, at) = level;
        }
      }
    }
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        double& v = ds.images(k, 0, y, x);
        v = std::clamp(std::round(v + noise(rng)), 0.0, 255.0);
      }
  }
  return ds;
}

Dataset synth_noise(std::size_t n, std::size_t size, std::mt19937_64& rng) {
  Dataset ds;
  ds.source = "synth:noise";
  ds.images = Tensor4({n, 1, size, size});
  std::uniform_int_distribution<int> px(0, 255);
  for (double& v : ds.images.data()) v = px(rng);
  return ds;
}

}  // namespace mintnet::data
