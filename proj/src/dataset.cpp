#include "mrr/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "mrr/rng.hpp"

namespace mrr {
namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError(IdxError::Kind::Open, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t at) {
  return (std::uint32_t(b[at]) << 24) | (std::uint32_t(b[at + 1]) << 16) | (std::uint32_t(b[at + 2]) << 8) |
         std::uint32_t(b[at + 3]);
}

void put_be32(std::ofstream& out, std::uint32_t v) {
  const char bytes[4] = {char(v >> 24), char(v >> 16), char(v >> 8), char(v)};
  out.write(bytes, 4);
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IdxError(IdxError::Kind::Open, "cannot write " + path.string());
  return out;
}

void require_size(const std::vector<unsigned char>& bytes, std::size_t need, const std::filesystem::path& path) {
  if (bytes.size() < need) {
    throw IdxError(IdxError::Kind::Truncated, path.string() + ": truncated, " + std::to_string(bytes.size()) +
                                                  " bytes but header announces " + std::to_string(need));
  }
}

// Tiny augmenting-path max flow; graphs here have (classes + parts + 2) nodes.
struct MaxFlow {
  std::vector<std::vector<long>> cap;
  explicit MaxFlow(std::size_t n) : cap(n, std::vector<long>(n, 0)) {}

  long augment(std::size_t u, std::size_t sink, long limit, std::vector<char>& seen) {
    if (u == sink) return limit;
    seen[u] = 1;
    for (std::size_t v = 0; v < cap.size(); ++v) {
      if (seen[v] || cap[u][v] <= 0) continue;
      if (long got = augment(v, sink, std::min(limit, cap[u][v]), seen); got > 0) {
        cap[u][v] -= got;
        cap[v][u] += got;
        return got;
      }
    }
    return 0;
  }

  long run(std::size_t source, std::size_t sink) {
    long total = 0;
    while (true) {
      std::vector<char> seen(cap.size(), 0);
      const long got = augment(source, sink, std::numeric_limits<long>::max(), seen);
      if (got == 0) return total;
      total += got;
    }
  }
};

}  // namespace

Dataset subset(const Dataset& ds, std::span<const std::size_t> indices) {
  Dataset out;
  out.images = gather_rows(ds.images, indices);
  out.labels.reserve(indices.size());
  for (std::size_t i : indices) out.labels.push_back(ds.labels[i]);
  out.num_classes = ds.num_classes;
  return out;
}

Tensor read_idx_images(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  require_size(bytes, 4, path);
  const std::uint32_t magic = be32(bytes, 0);
  if (magic != kIdxImagesMagic && magic != kIdxImagesF64Magic) {
    throw IdxError(IdxError::Kind::WrongMagic, path.string() + ": magic " + std::to_string(magic) +
                                                   " is not an IDX image file (expected 0x00000803)");
  }
  require_size(bytes, 16, path);
  const std::size_t n = be32(bytes, 4), h = be32(bytes, 8), w = be32(bytes, 12);
  const std::size_t width = magic == kIdxImagesMagic ? 1 : 8;
  require_size(bytes, 16 + n * h * w * width, path);
  Tensor images({n, 1, h, w});
  if (magic == kIdxImagesMagic) {
    for (std::size_t i = 0; i < images.size(); ++i) images[i] = bytes[16 + i] / 255.0;
  } else {
    for (std::size_t i = 0; i < images.size(); ++i) {
      std::uint64_t bits = 0;
      for (std::size_t b = 0; b < 8; ++b) bits = (bits << 8) | bytes[16 + i * 8 + b];
      images[i] = std::bit_cast<double>(bits);
    }
  }
  return images;
}

std::vector<int> read_idx_labels(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  require_size(bytes, 4, path);
  if (const std::uint32_t magic = be32(bytes, 0); magic != kIdxLabelsMagic) {
    throw IdxError(IdxError::Kind::WrongMagic, path.string() + ": magic " + std::to_string(magic) +
                                                   " is not an IDX label file (expected 0x00000801)");
  }
  require_size(bytes, 8, path);
  const std::size_t n = be32(bytes, 4);
  require_size(bytes, 8 + n, path);
  return std::vector<int>(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(n));
}

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  Dataset ds;
  ds.images = read_idx_images(images_path);
  ds.labels = read_idx_labels(labels_path);
  if (ds.images.rows() != ds.labels.size()) {
    throw IdxError(IdxError::Kind::CountMismatch, "image count " + std::to_string(ds.images.rows()) +
                                                      " differs from label count " + std::to_string(ds.labels.size()));
  }
  const int max_label = ds.labels.empty() ? -1 : *std::max_element(ds.labels.begin(), ds.labels.end());
  ds.num_classes = static_cast<std::size_t>(max_label + 1);
  return ds;
}

void write_idx_images_u8(const std::filesystem::path& path, const Tensor& images) {
  auto out = open_out(path);
  put_be32(out, kIdxImagesMagic);
  put_be32(out, static_cast<std::uint32_t>(images.rows()));
  put_be32(out, static_cast<std::uint32_t>(images.shape.at(images.rank() - 2)));
  put_be32(out, static_cast<std::uint32_t>(images.shape.back()));
  for (double v : images.data) {
    if (!(v >= 0.0 && v <= 1.0)) throw DataError("IDX byte images require values in [0, 1]");
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
  }
}

void write_idx_images_f64(const std::filesystem::path& path, const Tensor& images) {
  auto out = open_out(path);
  put_be32(out, kIdxImagesF64Magic);
  put_be32(out, static_cast<std::uint32_t>(images.rows()));
  put_be32(out, static_cast<std::uint32_t>(images.shape.at(images.rank() - 2)));
  put_be32(out, static_cast<std::uint32_t>(images.shape.back()));
  for (double v : images.data) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    char bytes[8];
    for (int b = 0; b < 8; ++b) bytes[b] = static_cast<char>(bits >> (56 - 8 * b));
    out.write(bytes, 8);
  }
}

void write_idx_labels(const std::filesystem::path& path, std::span<const int> labels) {
  auto out = open_out(path);
  put_be32(out, kIdxLabelsMagic);
  put_be32(out, static_cast<std::uint32_t>(labels.size()));
  for (int l : labels) {
    if (l < 0 || l > 255) throw DataError("IDX labels must fit in one byte");
    out.put(static_cast<char>(l));
  }
}

std::vector<std::vector<std::size_t>> stratified_split(std::span<const int> labels, std::size_t num_classes,
                                                       std::span<const double> fractions, std::uint64_t seed) {
  double sum = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0)) throw DataError("split fractions must be nonnegative");
    sum += f;
  }
  if (fractions.empty() || std::abs(sum - 1.0) > 1e-9) throw DataError("split fractions must sum to 1");

  const std::size_t K = num_classes, S = fractions.size(), N = labels.size();
  std::vector<std::vector<std::size_t>> by_class(K);
  for (std::size_t i = 0; i < N; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= K) throw DataError("label out of range in split");
    by_class[labels[i]].push_back(i);
  }

  // Part totals by largest remainder.
  std::vector<long> target(S);
  std::vector<std::pair<double, std::size_t>> rem;
  long assigned = 0;
  for (std::size_t k = 0; k < S; ++k) {
    const double exact = static_cast<double>(N) * fractions[k];
    target[k] = static_cast<long>(std::floor(exact + 1e-9));
    assigned += target[k];
    rem.emplace_back(exact - static_cast<double>(target[k]), k);
  }
  std::stable_sort(rem.begin(), rem.end(), [](auto& a, auto& b) { return a.first > b.first; });
  for (std::size_t r = 0; assigned < static_cast<long>(N); ++r, ++assigned) ++target[rem[r % S].second];

  // Floors per (class, part), then place the leftover units through a flow network.
  std::vector<std::vector<long>> count(K, std::vector<long>(S));
  std::vector<std::vector<char>> fractional(K, std::vector<char>(S, 0));
  std::vector<long> class_extra(K), part_room(S);
  for (std::size_t k = 0; k < S; ++k) part_room[k] = target[k];
  for (std::size_t c = 0; c < K; ++c) {
    long used = 0;
    for (std::size_t k = 0; k < S; ++k) {
      const double exact = static_cast<double>(by_class[c].size()) * fractions[k];
      count[c][k] = static_cast<long>(std::floor(exact + 1e-9));
      fractional[c][k] = exact - static_cast<double>(count[c][k]) > 1e-9;
      used += count[c][k];
      part_room[k] -= count[c][k];
    }
    class_extra[c] = static_cast<long>(by_class[c].size()) - used;
  }
  const std::size_t source = K + S, sink = K + S + 1;
  MaxFlow flow(K + S + 2);
  for (std::size_t c = 0; c < K; ++c) {
    flow.cap[source][c] = class_extra[c];
    for (std::size_t k = 0; k < S; ++k) flow.cap[c][K + k] = fractional[c][k] ? 1 : 0;
  }
  for (std::size_t k = 0; k < S; ++k) flow.cap[K + k][sink] = std::max(0L, part_room[k]);
  long needed = std::accumulate(class_extra.begin(), class_extra.end(), 0L);
  needed -= flow.run(source, sink);
  if (needed > 0) {
    // No table hits the exact totals; relax part sizes and finish the rounding.
    for (std::size_t k = 0; k < S; ++k) flow.cap[K + k][sink] += static_cast<long>(N);
    flow.run(source, sink);
  }
  for (std::size_t c = 0; c < K; ++c)
    for (std::size_t k = 0; k < S; ++k) count[c][k] += flow.cap[K + k][c];

  std::vector<std::vector<std::size_t>> parts(S);
  for (std::size_t c = 0; c < K; ++c) {
    Rng rng(seed ^ (0xA5A5A5A5ULL + 0x9E3779B97F4A7C15ULL * (c + 1)));
    auto& idx = by_class[c];
    rng.shuffle(std::span<std::size_t>(idx));
    std::size_t at = 0;
    for (std::size_t k = 0; k < S; ++k) {
      for (long n = 0; n < count[c][k]; ++n) parts[k].push_back(idx[at++]);
    }
  }
  for (auto& p : parts) std::sort(p.begin(), p.end());
  return parts;
}

SplitDataset split(const Dataset& ds, const SplitFractions& fractions, std::uint64_t seed,
                   bool calibration_required) {
  const double f[] = {fractions.train, fractions.val, fractions.calibration};
  const auto parts = stratified_split(ds.labels, ds.num_classes, f, seed);
  if (calibration_required && parts[2].empty()) {
    throw DataError("calibration split is empty but fusion calibration needs held-out samples");
  }
  return {subset(ds, parts[0]), subset(ds, parts[1]), subset(ds, parts[2])};
}

}  // namespace mrr
