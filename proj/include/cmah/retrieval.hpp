#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cmah/common.hpp"

namespace cmah::retrieval {

enum class Modality : uint8_t { image = 0, point = 1 };

// Bit-packed binary codes, immutable after construction. Bit j of entry i is
// set iff code value +1, little-endian bit order within each 64-bit word;
// bits at K and beyond stay zero.
class CodeDatabase {
 public:
  // rows: count x K matrix with entries exactly -1 or +1.
  static CodeDatabase from_sign_rows(const RowMat& rows, Modality modality,
                                     std::vector<uint32_t> labels = {});

  int k() const { return k_; }
  int words_per_code() const { return wpc_; }
  int64_t count() const { return count_; }
  Modality modality() const { return modality_; }
  bool labeled() const { return !labels_.empty(); }

  const uint64_t* code(int64_t i) const { return words_.data() + i * wpc_; }
  const std::vector<uint64_t>& words() const { return words_; }
  uint32_t label(int64_t i) const;
  const std::vector<uint32_t>& labels() const { return labels_; }
  Array unpack_row(int64_t i) const;  // back to {-1,+1}^K

  void save(const std::string& path) const;
  static CodeDatabase load(const std::string& path);

 private:
  CodeDatabase() = default;
  int k_ = 0, wpc_ = 0;
  int64_t count_ = 0;
  Modality modality_ = Modality::image;
  std::vector<uint64_t> words_;
  std::vector<uint32_t> labels_;
};

// {-1,+1}^K -> packed words and back.
std::vector<uint64_t> pack(const Array& code, int k);
Array unpack(const uint64_t* words, int k);

// Differing-bit count by XOR + popcount over whole words.
int hamming(const uint64_t* a, const uint64_t* b, int words);

struct RankedEntry {
  int64_t id = 0;
  int dist = 0;
  bool operator==(const RankedEntry&) const = default;
};
// Distances non-decreasing; ids ascending within one distance.
using RankedResult = std::vector<RankedEntry>;

// Top-k scan of the database. `exclude_id` drops one entry from consideration
// (-1 scans everything). The word-parallel path is the production scan; the
// per-bit reference path must rank identically and stays available for
// cross-checks.
RankedResult search(const uint64_t* query, const CodeDatabase& db, int topk,
                    int64_t exclude_id = -1);
RankedResult search_reference(const uint64_t* query, const CodeDatabase& db, int topk,
                              int64_t exclude_id = -1);

struct EvalOptions {
  int k = 100;
  // Aligned cross-modal sets store the same pair at the same row in both
  // files, so row i of the gallery is query i's own pair: drop it to keep
  // self-matches out of the ranking. Turn off for unaligned galleries.
  bool exclude_same_index = true;
};

// mAP@k with AP = sum_r P(r) rel(r) / min(k, R_total), averaged over queries
// that have at least one relevant gallery entry. Throws UsageError when either
// side is unlabeled or the code widths differ.
Scalar map_at_k(const CodeDatabase& queries, const CodeDatabase& gallery, const EvalOptions& opt);

// precision@k for each requested k: mean over all queries of relevant-in-top-k
// divided by k.
std::vector<std::pair<int, Scalar>> precision_curve(const CodeDatabase& queries,
                                                    const CodeDatabase& gallery,
                                                    const std::vector<int>& ks,
                                                    bool exclude_same_index = true);

}  // namespace cmah::retrieval
