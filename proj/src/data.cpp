#include "data.hpp"

#include <cstring>
#include <fstream>
#include <random>

#include "rng.hpp"
#include "tensor.hpp"

namespace moelab {

std::vector<int64_t> ByteTokenizer::encode(std::string_view text) const {
    std::vector<int64_t> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(static_cast<int64_t>(c));
    return ids;
}

std::string ByteTokenizer::decode(std::span<const int64_t> ids) const {
    std::string out;
    out.reserve(ids.size());
    for (int64_t id : ids) {
        if (id >= 0 && id < 256) out.push_back(static_cast<char>(id));
    }
    return out;
}

TokenWindowDataset build_windows(std::span<const int64_t> stream, int64_t window_len,
                                 int64_t vocab_size) {
    if (window_len < 2) fail("build_windows: window_len must be >= 2");
    if (static_cast<int64_t>(stream.size()) < window_len) {
        fail("build_windows: stream of " + std::to_string(stream.size()) +
             " tokens is shorter than one window (" + std::to_string(window_len) + ")");
    }
    const int64_t count = static_cast<int64_t>(stream.size()) / window_len;
    TokenWindowDataset ds;
    ds.window_len = window_len;
    ds.vocab_size = vocab_size;
    ds.tokens.resize(static_cast<size_t>(count * window_len));
    for (int64_t i = 0; i < count * window_len; ++i) {
        const int64_t id = stream[static_cast<size_t>(i)];
        if (id < 0 || id >= vocab_size) {
            fail("build_windows: token id " + std::to_string(id) + " out of range for vocab " +
                 std::to_string(vocab_size));
        }
        ds.tokens[static_cast<size_t>(i)] = static_cast<int32_t>(id);
    }
    return ds;
}

SplitIndices split_train_val(int64_t n_windows, double train_ratio, uint64_t shard_seed) {
    if (n_windows < 1) fail("split_train_val: empty dataset");
    if (train_ratio <= 0.0 || train_ratio >= 1.0) {
        fail("split_train_val: ratio must be in (0,1), got " + std::to_string(train_ratio));
    }
    SplitIndices s;
    rng::Stream stream(shard_seed, "split");
    for (int64_t i = 0; i < n_windows; ++i) {
        if (stream.uniform(static_cast<uint64_t>(i)) < train_ratio) {
            s.train.push_back(i);
        } else {
            s.val.push_back(i);
        }
    }
    return s;
}

BatchIterator::BatchIterator(const TokenWindowDataset& ds, std::vector<int64_t> indices,
                             int64_t batch_size, uint64_t seed)
    : ds_(ds), base_(std::move(indices)), batch_size_(batch_size), seed_(seed) {
    if (base_.empty()) fail("batch_iterator: empty index set");
    if (batch_size_ < 1) fail("batch_iterator: batch_size must be >= 1");
    reshuffle();
}

int64_t BatchIterator::batches_per_epoch() const {
    const int64_t n = static_cast<int64_t>(base_.size());
    return (n + batch_size_ - 1) / batch_size_;
}

void BatchIterator::reshuffle() {
    order_ = base_;
    // raw mt19937_64 output is pinned by the standard, so this order is
    // identical on every platform
    std::mt19937_64 eng(rng::combine(rng::combine(seed_, rng::hash_str("shuffle")),
                                     static_cast<uint64_t>(epoch_)));
    for (size_t i = order_.size(); i > 1; --i) {
        const size_t j = static_cast<size_t>(eng() % i);
        std::swap(order_[i - 1], order_[j]);
    }
    cursor_ = 0;
}

BatchIterator::Batch BatchIterator::next() {
    const int64_t n = static_cast<int64_t>(order_.size());
    const int64_t rows = std::min<int64_t>(batch_size_, n - cursor_);
    Batch b;
    b.rows = rows;
    b.window = ds_.window_len;
    b.tokens.reserve(static_cast<size_t>(rows * ds_.window_len));
    for (int64_t r = 0; r < rows; ++r) {
        const auto w = ds_.window(order_[static_cast<size_t>(cursor_ + r)]);
        for (int32_t id : w) b.tokens.push_back(id);
    }
    cursor_ += rows;
    if (cursor_ >= n) {
        b.epoch_end = true;
        ++epoch_;
        reshuffle();
    }
    return b;
}

namespace {

constexpr char kMagic[4] = {'M', 'L', 'D', 'S'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, uint64_t v) {
    put_u32(os, static_cast<uint32_t>(v));
    put_u32(os, static_cast<uint32_t>(v >> 32));
}

uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
           static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
}

uint64_t get_u64(std::istream& is) {
    const uint64_t lo = get_u32(is);
    const uint64_t hi = get_u32(is);
    return lo | hi << 32;
}

} // namespace

void save_dataset(const TokenWindowDataset& ds, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) fail("save_dataset: cannot open " + path);
    os.write(kMagic, 4);
    put_u32(os, kVersion);
    put_u32(os, static_cast<uint32_t>(ds.vocab_size));
    put_u32(os, static_cast<uint32_t>(ds.window_len));
    put_u64(os, static_cast<uint64_t>(ds.count()));
    for (int32_t id : ds.tokens) put_u32(os, static_cast<uint32_t>(id));
    if (!os) fail("save_dataset: write failed for " + path);
}

TokenWindowDataset load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail("load_dataset: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) {
        fail("load_dataset: " + path + " is not a dataset file");
    }
    const uint32_t version = get_u32(is);
    if (version != kVersion) {
        fail("load_dataset: unsupported version " + std::to_string(version));
    }
    TokenWindowDataset ds;
    ds.vocab_size = get_u32(is);
    ds.window_len = get_u32(is);
    const uint64_t count = get_u64(is);
    ds.tokens.resize(static_cast<size_t>(count * static_cast<uint64_t>(ds.window_len)));
    for (auto& id : ds.tokens) id = static_cast<int32_t>(get_u32(is));
    if (!is) fail("load_dataset: truncated file " + path);
    return ds;
}

} // namespace moelab
