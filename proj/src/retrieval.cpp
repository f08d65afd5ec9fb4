#include "cmah/retrieval.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace cmah::retrieval {

namespace {

static_assert(std::endian::native == std::endian::little,
              "code file IO assumes a little-endian host");

constexpr char kMagic[8] = {'C', 'M', 'A', 'H', 'C', 'O', 'D', 'E'};
constexpr uint16_t kVersion = 1;

template <typename T>
void put(std::ofstream& f, T v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::ifstream& f, const char* what) {
  T v{};
  f.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!f) throw FormatError(std::string("code file: truncated reading ") + what);
  return v;
}

int64_t count_relevant(const CodeDatabase& gallery, uint32_t label, int64_t exclude) {
  int64_t r = 0;
  for (int64_t j = 0; j < gallery.count(); ++j) {
    if (j != exclude && gallery.label(j) == label) ++r;
  }
  return r;
}

}  // namespace

std::vector<uint64_t> pack(const Array& code, int k) {
  if (k < 1 || code.size() != k) {
    throw std::invalid_argument("pack: expected " + std::to_string(k) + " code entries, got " +
                                std::to_string(code.size()));
  }
  std::vector<uint64_t> words((k + 63) / 64, 0);
  for (int j = 0; j < k; ++j) {
    if (code[j] == 1.0) {
      words[j / 64] |= uint64_t{1} << (j % 64);
    } else if (code[j] != -1.0) {
      throw std::invalid_argument("pack: code entries must be exactly -1 or +1, got " +
                                  std::to_string(code[j]) + " at bit " + std::to_string(j));
    }
  }
  return words;
}

Array unpack(const uint64_t* words, int k) {
  Array code(k);
  for (int j = 0; j < k; ++j) {
    code[j] = (words[j / 64] >> (j % 64)) & 1 ? 1.0 : -1.0;
  }
  return code;
}

int hamming(const uint64_t* a, const uint64_t* b, int words) {
  int d = 0;
  for (int w = 0; w < words; ++w) d += std::popcount(a[w] ^ b[w]);
  return d;
}

CodeDatabase CodeDatabase::from_sign_rows(const RowMat& rows, Modality modality,
                                          std::vector<uint32_t> labels) {
  if (rows.cols() < 1 || rows.cols() > 0xFFFF) {
    throw std::invalid_argument("CodeDatabase: code length out of range");
  }
  if (!labels.empty() && static_cast<Eigen::Index>(labels.size()) != rows.rows()) {
    throw std::invalid_argument("CodeDatabase: " + std::to_string(labels.size()) +
                                " labels for " + std::to_string(rows.rows()) + " codes");
  }
  CodeDatabase db;
  db.k_ = static_cast<int>(rows.cols());
  db.wpc_ = (db.k_ + 63) / 64;
  db.count_ = rows.rows();
  db.modality_ = modality;
  db.labels_ = std::move(labels);
  db.words_.reserve(static_cast<size_t>(db.count_) * db.wpc_);
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    auto w = pack(rows.row(i).transpose().array(), db.k_);
    db.words_.insert(db.words_.end(), w.begin(), w.end());
  }
  return db;
}

uint32_t CodeDatabase::label(int64_t i) const {
  if (labels_.empty()) throw UsageError("CodeDatabase: entries carry no labels");
  return labels_[static_cast<size_t>(i)];
}

Array CodeDatabase::unpack_row(int64_t i) const { return unpack(code(i), k_); }

void CodeDatabase::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("code file: cannot open '" + path + "' for writing");
  f.write(kMagic, sizeof kMagic);
  put<uint16_t>(f, kVersion);
  put<uint16_t>(f, static_cast<uint16_t>(k_));
  put<uint64_t>(f, static_cast<uint64_t>(count_));
  put<uint8_t>(f, static_cast<uint8_t>(modality_));
  put<uint8_t>(f, labels_.empty() ? 0 : 1);
  f.write(reinterpret_cast<const char*>(words_.data()),
          static_cast<std::streamsize>(words_.size() * sizeof(uint64_t)));
  if (!labels_.empty()) {
    f.write(reinterpret_cast<const char*>(labels_.data()),
            static_cast<std::streamsize>(labels_.size() * sizeof(uint32_t)));
  }
  f.flush();
  if (!f) throw FormatError("code file: write to '" + path + "' failed");
}

CodeDatabase CodeDatabase::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("code file: cannot open '" + path + "'");
  char magic[8];
  f.read(magic, sizeof magic);
  if (!f || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw FormatError("code file: bad magic in '" + path + "', expected CMAHCODE");
  }
  uint16_t version = get<uint16_t>(f, "version");
  if (version != kVersion) {
    throw FormatError("code file: unsupported version " + std::to_string(version));
  }
  CodeDatabase db;
  db.k_ = get<uint16_t>(f, "code length");
  if (db.k_ < 1) throw FormatError("code file: zero code length");
  db.wpc_ = (db.k_ + 63) / 64;
  uint64_t count = get<uint64_t>(f, "count");
  db.count_ = static_cast<int64_t>(count);
  db.modality_ = static_cast<Modality>(get<uint8_t>(f, "modality"));
  if (db.modality_ != Modality::image && db.modality_ != Modality::point) {
    throw FormatError("code file: unknown modality tag");
  }
  uint8_t has_labels = get<uint8_t>(f, "label flag");
  if (has_labels > 1) throw FormatError("code file: bad label flag");

  db.words_.resize(static_cast<size_t>(db.count_) * db.wpc_);
  f.read(reinterpret_cast<char*>(db.words_.data()),
         static_cast<std::streamsize>(db.words_.size() * sizeof(uint64_t)));
  if (!f) throw FormatError("code file: truncated code section in '" + path + "'");
  if (has_labels) {
    db.labels_.resize(static_cast<size_t>(db.count_));
    f.read(reinterpret_cast<char*>(db.labels_.data()),
           static_cast<std::streamsize>(db.labels_.size() * sizeof(uint32_t)));
    if (!f) throw FormatError("code file: truncated label section in '" + path + "'");
  }
  f.peek();
  if (!f.eof()) throw FormatError("code file: trailing bytes in '" + path + "'");

  const int tail_bits = db.k_ % 64;
  if (tail_bits != 0) {
    const uint64_t mask = ~((uint64_t{1} << tail_bits) - 1);
    for (int64_t i = 0; i < db.count_; ++i) {
      if (db.code(i)[db.wpc_ - 1] & mask) {
        throw FormatError("code file: set bits beyond the code length");
      }
    }
  }
  return db;
}

RankedResult search(const uint64_t* query, const CodeDatabase& db, int topk, int64_t exclude_id) {
  if (topk < 0) throw std::invalid_argument("search: negative topk");
  RankedResult all;
  all.reserve(static_cast<size_t>(db.count()));
  for (int64_t i = 0; i < db.count(); ++i) {
    if (i == exclude_id) continue;
    all.push_back({i, hamming(query, db.code(i), db.words_per_code())});
  }
  std::sort(all.begin(), all.end(), [](const RankedEntry& a, const RankedEntry& b) {
    return a.dist != b.dist ? a.dist < b.dist : a.id < b.id;
  });
  if (static_cast<size_t>(topk) < all.size()) all.resize(static_cast<size_t>(topk));
  return all;
}

RankedResult search_reference(const uint64_t* query, const CodeDatabase& db, int topk,
                              int64_t exclude_id) {
  if (topk < 0) throw std::invalid_argument("search: negative topk");
  Array q = unpack(query, db.k());
  RankedResult all;  // built in id order, stable-sorted on distance alone
  for (int64_t i = 0; i < db.count(); ++i) {
    if (i == exclude_id) continue;
    Array e = db.unpack_row(i);
    int d = 0;
    for (int j = 0; j < db.k(); ++j) d += q[j] != e[j] ? 1 : 0;
    all.push_back({i, d});
  }
  std::stable_sort(all.begin(), all.end(),
                   [](const RankedEntry& a, const RankedEntry& b) { return a.dist < b.dist; });
  if (static_cast<size_t>(topk) < all.size()) all.resize(static_cast<size_t>(topk));
  return all;
}

Scalar map_at_k(const CodeDatabase& queries, const CodeDatabase& gallery, const EvalOptions& opt) {
  if (!queries.labeled() || !gallery.labeled()) {
    throw UsageError("map_at_k: both code sets must carry labels");
  }
  if (queries.k() != gallery.k()) {
    throw UsageError("map_at_k: code lengths differ, " + std::to_string(queries.k()) + " vs " +
                     std::to_string(gallery.k()));
  }
  if (opt.k < 1) throw UsageError("map_at_k: k must be >= 1");

  const int64_t n = queries.count();
  std::vector<Scalar> ap(static_cast<size_t>(n), 0.0);
  std::vector<char> counted(static_cast<size_t>(n), 0);
  parallel_for(n, [&](int64_t i) {
    const int64_t exclude =
        opt.exclude_same_index && i < gallery.count() ? i : int64_t{-1};
    const uint32_t want = queries.label(i);
    const int64_t r_total = count_relevant(gallery, want, exclude);
    if (r_total == 0) return;
    RankedResult top = search(queries.code(i), gallery, opt.k, exclude);
    int64_t hits = 0;
    Scalar sum = 0.0;
    for (size_t r = 0; r < top.size(); ++r) {
      if (gallery.label(top[r].id) == want) {
        ++hits;
        sum += static_cast<Scalar>(hits) / static_cast<Scalar>(r + 1);
      }
    }
    ap[static_cast<size_t>(i)] =
        sum / static_cast<Scalar>(std::min<int64_t>(opt.k, r_total));
    counted[static_cast<size_t>(i)] = 1;
  });

  Scalar total = 0.0;
  int64_t used = 0;
  for (int64_t i = 0; i < n; ++i) {
    if (counted[static_cast<size_t>(i)]) {
      total += ap[static_cast<size_t>(i)];
      ++used;
    }
  }
  if (used == 0) throw UsageError("map_at_k: no query has a relevant gallery entry");
  return total / static_cast<Scalar>(used);
}

std::vector<std::pair<int, Scalar>> precision_curve(const CodeDatabase& queries,
                                                    const CodeDatabase& gallery,
                                                    const std::vector<int>& ks,
                                                    bool exclude_same_index) {
  if (!queries.labeled() || !gallery.labeled()) {
    throw UsageError("precision_curve: both code sets must carry labels");
  }
  if (queries.k() != gallery.k()) {
    throw UsageError("precision_curve: code lengths differ");
  }
  if (ks.empty()) throw UsageError("precision_curve: no k values requested");
  int max_k = 0;
  for (int k : ks) {
    if (k < 1) throw UsageError("precision_curve: k values must be >= 1");
    max_k = std::max(max_k, k);
  }

  const int64_t n = queries.count();
  if (n == 0) throw UsageError("precision_curve: empty query set");
  // rel[i] holds, per query, the relevance indicator of each ranked position.
  std::vector<std::vector<char>> rel(static_cast<size_t>(n));
  parallel_for(n, [&](int64_t i) {
    const int64_t exclude = exclude_same_index && i < gallery.count() ? i : int64_t{-1};
    RankedResult top = search(queries.code(i), gallery, max_k, exclude);
    auto& row = rel[static_cast<size_t>(i)];
    row.resize(top.size());
    for (size_t r = 0; r < top.size(); ++r) {
      row[r] = gallery.label(top[r].id) == queries.label(i) ? 1 : 0;
    }
  });

  std::vector<std::pair<int, Scalar>> out;
  out.reserve(ks.size());
  for (int k : ks) {
    Scalar total = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      const auto& row = rel[static_cast<size_t>(i)];
      int64_t hits = 0;
      for (size_t r = 0; r < row.size() && r < static_cast<size_t>(k); ++r) hits += row[r];
      total += static_cast<Scalar>(hits) / static_cast<Scalar>(k);
    }
    out.emplace_back(k, total / static_cast<Scalar>(n));
  }
  return out;
}

}  // namespace cmah::retrieval
