//
// semla - equivariant latent attention and flow matching for molecules
// SPDX-License-Identifier: Apache-2.0
//

#include "semla/checkpoint.h"

#include <cstring>
#include <map>
#include <sstream>

#include <boost/crc.hpp>

#include "semla/sdf.h"

namespace semla {
using Crc64Xz = boost::crc_optimal<64, 0x42F0E1EBA9EA3693ULL,
                                   0xFFFFFFFFFFFFFFFFULL,
                                   0xFFFFFFFFFFFFFFFFULL, true, true>;

std::uint64_t crc64(std::string_view bytes) {
  Crc64Xz crc;
  crc.process_bytes(bytes.data(), bytes.size());
  return crc.checksum();
}

namespace {
constexpr std::uint8_t kFloat64 = 0;
constexpr std::uint8_t kText = 1;

class Writer {
public:
  void raw(std::string_view s) { out_.append(s); }

  template <class T> void le(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i)
      out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }

  void header(const std::string &name, std::uint8_t dtype, const Shape &dims) {
    le<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    raw(name);
    le<std::uint8_t>(dtype);
    le<std::uint32_t>(static_cast<std::uint32_t>(dims.size()));
    for (std::size_t d: dims)
      le<std::uint64_t>(d);
  }

  void text(const std::string &name, std::string_view body) {
    header(name, kText, { body.size() });
    payload(body);
  }

  void tensor(const std::string &name, const Tensor &t) {
    header(name, kFloat64, t.shape());
    std::string bytes;
    bytes.reserve(t.size() * 8);
    for (double v: t.data()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, 8);
      for (int i = 0; i < 8; ++i)
        bytes.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
    }
    payload(bytes);
  }

  std::string finish() {
    le<std::uint64_t>(crc_.checksum());
    return std::move(out_);
  }

private:
  void payload(std::string_view bytes) {
    crc_.process_bytes(bytes.data(), bytes.size());
    raw(bytes);
  }

  std::string out_;
  Crc64Xz crc_;
};

class Reader {
public:
  explicit Reader(std::string_view bytes): bytes_(bytes) { }

  bool at_trailer() const { return bytes_.size() - pos_ == 8; }

  std::string_view take(std::size_t n) {
    const std::size_t left = bytes_.size() - pos_;
    if (n > left || left - n < 8)
      throw CheckpointError("checkpoint truncated at byte "
                            + std::to_string(pos_));
    std::string_view s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  template <class T> T le() {
    std::string_view s = take(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      v |= static_cast<T>(static_cast<unsigned char>(s[i])) << (8 * i);
    return v;
  }

  std::string_view payload(std::size_t n) {
    std::string_view s = take(n);
    crc_.process_bytes(s.data(), s.size());
    return s;
  }

  std::uint64_t crc() const { return crc_.checksum(); }

private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
  Crc64Xz crc_;
};

std::string meta_text(const Vocabulary &vocab, const SemlaConfig &config) {
  return "[vocabulary]\n" + vocab.serialize() + "[model]\n" + config.serialize();
}

void parse_meta(std::string_view text, Vocabulary &vocab, SemlaConfig &config) {
  const auto v = text.find("[vocabulary]\n");
  const auto m = text.find("[model]\n");
  if (v != 0 || m == std::string_view::npos)
    throw CheckpointError("checkpoint metadata lacks [vocabulary]/[model]");
  try {
    vocab = Vocabulary::parse(text.substr(13, m - 13));
    config = SemlaConfig::parse(text.substr(m + 8));
  } catch (const std::exception &e) {
    throw CheckpointError(std::string("checkpoint metadata: ") + e.what());
  }
  if (vocab.n_atom_types() != config.n_atom_types
      || vocab.n_charges() != config.n_charges)
    throw CheckpointError("checkpoint vocabulary does not match model config");
}
}  // namespace

std::string encode_checkpoint(const Checkpoint &ckpt) {
  ckpt.params.check_shapes();
  Writer w;
  w.raw(kCheckpointMagic);
  w.text("__meta__", meta_text(ckpt.vocab, ckpt.params.config));
  if (!ckpt.train_state.empty())
    w.text("__train__", ckpt.train_state);
  ckpt.params.for_each(
      [&](const std::string &name, const Tensor &t) { w.tensor(name, t); });
  for (const auto &[name, t]: ckpt.extra)
    w.tensor(name, t);
  return w.finish();
}

std::uint64_t stored_crc(std::string_view bytes) {
  if (bytes.size() < kCheckpointMagic.size() + 8)
    throw CheckpointError("checkpoint too short");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= static_cast<std::uint64_t>(
             static_cast<unsigned char>(bytes[bytes.size() - 8 + i]))
         << (8 * i);
  return v;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic)
    throw CheckpointError("not a checkpoint (bad magic)");
  const std::uint64_t expected_crc = stored_crc(bytes);
  Reader r(bytes.substr(kCheckpointMagic.size()));

  Checkpoint ckpt;
  bool have_meta = false;
  std::map<std::string, Tensor> tensors;
  std::vector<std::string> order;
  while (!r.at_trailer()) {
    const auto name_len = r.le<std::uint32_t>();
    const std::string name(r.take(name_len));
    const auto dtype = r.le<std::uint8_t>();
    const auto rank = r.le<std::uint32_t>();
    if (rank > 8)
      throw CheckpointError("entry " + name + " has implausible rank "
                            + std::to_string(rank));
    Shape dims(rank);
    for (auto &d: dims)
      d = r.le<std::uint64_t>();

    if (dtype == kText) {
      if (rank != 1)
        throw CheckpointError("text entry " + name + " must have rank 1");
      const std::string body(r.payload(dims[0]));
      if (name == "__meta__") {
        parse_meta(body, ckpt.vocab, ckpt.params.config);
        have_meta = true;
      } else if (name == "__train__") {
        ckpt.train_state = body;
      } else {
        throw CheckpointError("unknown text entry " + name);
      }
      continue;
    }
    if (dtype != kFloat64)
      throw CheckpointError("entry " + name + " has unknown dtype "
                            + std::to_string(dtype));
    if (!have_meta)
      throw CheckpointError("tensor entry before __meta__");
    std::size_t count = 1;
    for (std::size_t d: dims) {
      if (d != 0 && count > bytes.size() / d)
        throw CheckpointError("entry " + name + " is larger than the file");
      count *= d;
    }
    if (count > bytes.size() / 8)
      throw CheckpointError("entry " + name + " is larger than the file");
    std::string_view raw = r.payload(count * 8);
    std::vector<double> values(count);
    for (std::size_t i = 0; i < count; ++i) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b)
        bits |= static_cast<std::uint64_t>(
                    static_cast<unsigned char>(raw[i * 8 + b]))
                << (8 * b);
      std::memcpy(&values[i], &bits, 8);
    }
    if (!tensors.emplace(name, Tensor(dims, std::move(values))).second)
      throw CheckpointError("duplicate entry " + name);
    order.push_back(name);
  }
  if (r.crc() != expected_crc)
    throw CheckpointError("checkpoint CRC mismatch");
  if (!have_meta)
    throw CheckpointError("checkpoint lacks __meta__");

  ckpt.params = init_params(ckpt.params.config, 0);
  ckpt.params.for_each([&](const std::string &name, Tensor &t) {
    auto it = tensors.find(name);
    if (it == tensors.end())
      throw CheckpointError("checkpoint lacks parameter " + name);
    if (it->second.shape() != t.shape())
      throw CheckpointError("parameter " + name + " has shape "
                            + shape_str(it->second.shape()) + ", expected "
                            + shape_str(t.shape()));
    t = it->second;
    tensors.erase(it);
  });
  for (const std::string &name: order)
    if (auto it = tensors.find(name); it != tensors.end())
      ckpt.extra.emplace_back(name, it->second);
  return ckpt;
}

void save_checkpoint(const std::string &path, const Checkpoint &ckpt) {
  write_text_file(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::string &path) {
  return decode_checkpoint(read_text_file(path));
}
}  // namespace semla
