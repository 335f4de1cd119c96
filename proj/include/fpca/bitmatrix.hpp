// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "fpca/errors.hpp"
#include "fpca/rng.hpp"

namespace fpca {

using BitVec = std::vector<uint8_t>;

inline int popcount(const BitVec& v) {
  int n = 0;
  for (uint8_t b : v) n += (b != 0);
  return n;
}

inline BitVec ones_mask(int n) { return BitVec(static_cast<size_t>(n), 1); }

// Dense logical bit pattern. One byte per bit: the simulator is bound by
// circuit solves, not by bit storage, so clarity wins.
class BitMatrix {
 public:
  BitMatrix() = default;
  BitMatrix(int rows, int cols)
      : rows_(rows), cols_(cols),
        bits_(static_cast<size_t>(rows) * static_cast<size_t>(cols), 0) {}

  static BitMatrix random(int rows, int cols, Rng& rng) {
    BitMatrix m(rows, cols);
    for (auto& b : m.bits_) b = rng.coin() ? 1 : 0;
    return m;
  }

  // Column j holds min(j, rows) ones in its top rows.
  static BitMatrix staircase(int rows, int cols) {
    BitMatrix m(rows, cols);
    for (int j = 0; j < cols; ++j)
      for (int i = 0; i < rows && i < j; ++i) m.set(i, j, 1);
    return m;
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }

  uint8_t get(int r, int c) const { return bits_[idx(r, c)]; }
  void set(int r, int c, uint8_t v) { bits_[idx(r, c)] = v ? 1 : 0; }

  BitVec row(int r) const {
    BitVec out(static_cast<size_t>(cols_));
    for (int c = 0; c < cols_; ++c) out[static_cast<size_t>(c)] = get(r, c);
    return out;
  }

  int column_popcount(int c) const {
    int n = 0;
    for (int r = 0; r < rows_; ++r) n += get(r, c);
    return n;
  }

  bool operator==(const BitMatrix& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_ && bits_ == o.bits_;
  }

  const std::vector<uint8_t>& raw() const { return bits_; }

 private:
  size_t idx(int r, int c) const {
    return static_cast<size_t>(r) * static_cast<size_t>(cols_) +
           static_cast<size_t>(c);
  }

  int rows_ = 0;
  int cols_ = 0;
  std::vector<uint8_t> bits_;
};

}  // namespace fpca
