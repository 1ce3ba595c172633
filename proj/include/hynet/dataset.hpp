#pragma once

// IDX-format image/label ingestion (MNIST family), normalization to [0,1],
// and deterministic epoch batching.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <zlib.h>

#include "hynet/common.hpp"
#include "hynet/tensor.hpp"

namespace hynet {

struct Dataset {
  Tensor images;                    // [N,1,H,W], values in [0,1]
  std::vector<std::size_t> labels;  // [N], each in 0..M-1
  std::size_t num_classes = 10;
  std::string name;   // e.g. "mnist"
  std::string split;  // "train" | "test"

  std::size_t size() const { return labels.size(); }
};

namespace detail {

// Reads an entire IDX file, transparently gunzipping (gzread passes plain
// files through unchanged, so extension sniffing reduces to "let zlib look").
inline std::vector<unsigned char> read_idx_bytes(const std::string& path) {
  if (!std::filesystem::exists(path))
    throw IoError(msg("dataset file not found: ", path));
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw IoError(msg("cannot open dataset file: ", path));
  std::vector<unsigned char> out;
  unsigned char buf[1 << 16];
  int n;
  while ((n = gzread(f, buf, sizeof(buf))) > 0)
    out.insert(out.end(), buf, buf + n);
  bool bad = (n < 0);
  gzclose(f);
  if (bad) throw IoError(msg("decompression failed reading: ", path));
  return out;
}

inline std::uint32_t be32(const std::vector<unsigned char>& b,
                          std::size_t off, const std::string& path) {
  if (off + 4 > b.size())
    throw LengthError(msg("truncated IDX header in ", path));
  return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) |
         (std::uint32_t(b[off + 2]) << 8) | std::uint32_t(b[off + 3]);
}

}  // namespace detail

// Parses a big-endian IDX pair: images with magic 0x00000803 (u8, rank 3) and
// labels with magic 0x00000801 (u8, rank 1). Pixels are scaled by 1/255.
inline Dataset load_idx(const std::string& images_path,
                        const std::string& labels_path) {
  auto ib = detail::read_idx_bytes(images_path);
  std::uint32_t imagic = detail::be32(ib, 0, images_path);
  if (imagic != 0x00000803u)
    throw FormatError(msg("bad image magic 0x", std::hex, imagic, " in ",
                          images_path, " (want 0x803)"));
  std::size_t n = detail::be32(ib, 4, images_path);
  std::size_t rows = detail::be32(ib, 8, images_path);
  std::size_t cols = detail::be32(ib, 12, images_path);
  if (ib.size() != 16 + n * rows * cols)
    throw LengthError(msg("image payload in ", images_path, " has ",
                          ib.size() - 16, " bytes, header promises ",
                          n * rows * cols));

  auto lb = detail::read_idx_bytes(labels_path);
  std::uint32_t lmagic = detail::be32(lb, 0, labels_path);
  if (lmagic != 0x00000801u)
    throw FormatError(msg("bad label magic 0x", std::hex, lmagic, " in ",
                          labels_path, " (want 0x801)"));
  std::size_t ln = detail::be32(lb, 4, labels_path);
  if (lb.size() != 8 + ln)
    throw LengthError(msg("label payload in ", labels_path, " has ",
                          lb.size() - 8, " bytes, header promises ", ln));
  if (ln != n)
    throw ConsistencyError(msg("image count ", n, " (", images_path,
                               ") != label count ", ln, " (", labels_path,
                               ")"));

  std::vector<double> pixels(n * rows * cols);
  for (std::size_t i = 0; i < pixels.size(); ++i)
    pixels[i] = static_cast<double>(ib[16 + i]) / 255.0;

  Dataset d;
  d.images = Tensor::from({n, 1, rows, cols}, std::move(pixels));
  d.labels.resize(n);
  std::size_t max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    d.labels[i] = lb[8 + i];
    max_label = std::max(max_label, d.labels[i]);
  }
  if (max_label >= d.num_classes) d.num_classes = max_label + 1;
  return d;
}

// Re-encodes a dataset as a plain (uncompressed) IDX pair; the round-trip
// through load_idx is bit-identical. Pixels must be exact multiples of 1/255.
inline void save_idx(const Dataset& d, const std::string& images_path,
                     const std::string& labels_path) {
  std::size_t n = d.size();
  std::size_t rows = d.images.size(2), cols = d.images.size(3);
  auto put32 = [](std::ofstream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v)};
    os.write(reinterpret_cast<const char*>(b), 4);
  };
  std::ofstream fi(images_path, std::ios::binary);
  if (!fi) throw IoError(msg("cannot write ", images_path));
  put32(fi, 0x00000803u);
  put32(fi, static_cast<std::uint32_t>(n));
  put32(fi, static_cast<std::uint32_t>(rows));
  put32(fi, static_cast<std::uint32_t>(cols));
  const auto& px = d.images.data();
  std::vector<unsigned char> bytes(px.size());
  for (std::size_t i = 0; i < px.size(); ++i)
    bytes[i] = static_cast<unsigned char>(px[i] * 255.0 + 0.5);
  fi.write(reinterpret_cast<const char*>(bytes.data()),
           static_cast<std::streamsize>(bytes.size()));

  std::ofstream fl(labels_path, std::ios::binary);
  if (!fl) throw IoError(msg("cannot write ", labels_path));
  put32(fl, 0x00000801u);
  put32(fl, static_cast<std::uint32_t>(n));
  for (std::size_t i = 0; i < n; ++i) {
    unsigned char b = static_cast<unsigned char>(d.labels[i]);
    fl.write(reinterpret_cast<const char*>(&b), 1);
  }
}

// Loads a named dataset ("mnist" or "fashion-mnist") from a directory holding
// the four official IDX files (optionally .gz).
inline Dataset load_named_split(const std::string& data_dir,
                                const std::string& name,
                                const std::string& split) {
  std::string prefix = (split == "train") ? "train" : "t10k";
  auto pick = [&](const std::string& stem) {
    std::string plain = data_dir + "/" + stem;
    if (std::filesystem::exists(plain)) return plain;
    if (std::filesystem::exists(plain + ".gz")) return plain + ".gz";
    throw IoError(msg("missing dataset file ", plain, "[.gz] for ", name, " ",
                      split));
  };
  Dataset d = load_idx(pick(prefix + "-images-idx3-ubyte"),
                       pick(prefix + "-labels-idx1-ubyte"));
  d.name = name;
  d.split = split;
  return d;
}

// First-n subset view (copies the slice), used for attack subsets and smoke
// configurations.
inline Dataset subset(const Dataset& d, std::size_t n) {
  if (n == 0 || n > d.size())
    throw ContractError(msg("subset: n=", n, " outside 1..", d.size()));
  Dataset out;
  std::size_t hw = d.images.size(2) * d.images.size(3);
  out.images =
      Tensor::from({n, 1, d.images.size(2), d.images.size(3)},
                   std::vector<double>(d.images.data().begin(),
                                       d.images.data().begin() + n * hw));
  out.labels.assign(d.labels.begin(), d.labels.begin() + n);
  out.num_classes = d.num_classes;
  out.name = d.name;
  out.split = d.split;
  return out;
}

// ---------------------------------------------------------------------------
// Batching.
// ---------------------------------------------------------------------------

struct Batch {
  Tensor x;                         // [B,1,H,W]
  std::vector<std::size_t> labels;  // [B]
};

// An epoch's worth of full batches under a seeded permutation; remainder
// samples beyond the last full batch are dropped. Batches materialize lazily.
class BatchPlan {
 public:
  BatchPlan(const Dataset& data, std::size_t batch_size, std::uint64_t seed,
            std::size_t epoch_index)
      : data_(&data), batch_size_(batch_size) {
    if (batch_size == 0 || batch_size > data.size())
      throw ContractError(msg("epoch_batches: batch size ", batch_size,
                              " invalid for dataset of ", data.size()));
    Rng rng(mix_seed(seed, epoch_index));
    perm_ = random_permutation(data.size(), rng);
    num_batches_ = data.size() / batch_size;
  }

  std::size_t size() const { return num_batches_; }

  Batch get(std::size_t b) const {
    if (b >= num_batches_)
      throw ContractError(msg("batch index ", b, " >= ", num_batches_));
    std::size_t H = data_->images.size(2), W = data_->images.size(3);
    std::size_t hw = H * W;
    std::vector<double> xs(batch_size_ * hw);
    Batch out;
    out.labels.resize(batch_size_);
    const auto& px = data_->images.data();
    for (std::size_t i = 0; i < batch_size_; ++i) {
      std::size_t src = perm_[b * batch_size_ + i];
      std::copy(px.begin() + src * hw, px.begin() + (src + 1) * hw,
                xs.begin() + i * hw);
      out.labels[i] = data_->labels[src];
    }
    out.x = Tensor::from({batch_size_, 1, H, W}, std::move(xs));
    return out;
  }

  const std::vector<std::size_t>& permutation() const { return perm_; }

 private:
  const Dataset* data_;
  std::size_t batch_size_;
  std::size_t num_batches_;
  std::vector<std::size_t> perm_;
};

inline BatchPlan epoch_batches(const Dataset& data, std::size_t batch_size,
                               std::uint64_t seed, std::size_t epoch_index) {
  return BatchPlan(data, batch_size, seed, epoch_index);
}

}  // namespace hynet
