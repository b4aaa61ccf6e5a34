#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace moelab {

// Byte-level tokenizer: ids 0..255 are raw bytes, 256 is the document
// separator. decode(encode(text)) == text for any byte string.
class ByteTokenizer {
  public:
    static constexpr int64_t kSep = 256;
    int64_t vocab_size() const { return 257; }
    std::vector<int64_t> encode(std::string_view text) const;
    std::string decode(std::span<const int64_t> ids) const;
};

// Fixed-length non-overlapping token windows.
struct TokenWindowDataset {
    int64_t window_len = 0;
    int64_t vocab_size = 0;
    std::vector<int32_t> tokens; // count * window_len, row-major

    int64_t count() const {
        return window_len == 0 ? 0 : static_cast<int64_t>(tokens.size()) / window_len;
    }
    std::span<const int32_t> window(int64_t i) const {
        return {tokens.data() + i * window_len, static_cast<size_t>(window_len)};
    }
};

// floor(len/window_len) windows; the remainder is dropped.
TokenWindowDataset build_windows(std::span<const int64_t> stream, int64_t window_len,
                                 int64_t vocab_size);

struct SplitIndices {
    std::vector<int64_t> train;
    std::vector<int64_t> val;
};

// Stable pseudo-random assignment: membership of window i depends only on
// (shard_seed, i). train_ratio is the train-side fraction (e.g. 0.95).
SplitIndices split_train_val(int64_t n_windows, double train_ratio, uint64_t shard_seed);

// Epoch-shuffled batches over a fixed index set; the shuffle is keyed by
// (seed, epoch) and the final partial batch is kept.
class BatchIterator {
  public:
    BatchIterator(const TokenWindowDataset& ds, std::vector<int64_t> indices, int64_t batch_size,
                  uint64_t seed);

    struct Batch {
        std::vector<int64_t> tokens; // rows * window_len ids
        int64_t rows = 0;
        int64_t window = 0;
        bool epoch_end = false; // this batch closes an epoch
    };

    Batch next();
    int64_t epoch() const { return epoch_; }
    int64_t batches_per_epoch() const;

  private:
    const TokenWindowDataset& ds_;
    std::vector<int64_t> base_;
    std::vector<int64_t> order_;
    int64_t batch_size_;
    uint64_t seed_;
    int64_t cursor_ = 0;
    int64_t epoch_ = 0;

    void reshuffle();
};

void save_dataset(const TokenWindowDataset& ds, const std::string& path);
TokenWindowDataset load_dataset(const std::string& path);

// Loss-contributing tokens: each window of length L yields L-1 targets.
inline int64_t loss_tokens(int64_t windows, int64_t window_len) {
    return windows * (window_len - 1);
}

} // namespace moelab
