#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "rng.hpp"

namespace moelab {

enum class DType : uint8_t { F32, F64 };

inline size_t dtype_size(DType dt) { return dt == DType::F32 ? 4 : 8; }
const char* dtype_name(DType dt);

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Row-major element strides.
std::vector<int64_t> row_major_strides(const Shape& s);

struct TensorImpl;

// One recorded operation on the tape. `backward` reads the output's grad and
// accumulates into the inputs' grads.
struct GradNode {
    std::string op;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::function<void(TensorImpl& out)> backward;
};

struct TensorImpl {
    Shape shape;
    DType dtype = DType::F32;
    std::vector<std::byte> data;
    std::vector<std::byte> grad; // empty until first accumulation
    bool requires_grad = false;
    std::shared_ptr<GradNode> node; // null for leaves
    bool backward_ran = false;      // set on the root after a backward sweep

    int64_t numel() const { return shape_numel(shape); }

    template <typename T> std::span<T> vals() {
        return {reinterpret_cast<T*>(data.data()), data.size() / sizeof(T)};
    }
    template <typename T> std::span<const T> vals() const {
        return {reinterpret_cast<const T*>(data.data()), data.size() / sizeof(T)};
    }

    bool has_grad() const { return !grad.empty(); }
    void ensure_grad(); // materializes a zero grad buffer
    template <typename T> std::span<T> grads() {
        ensure_grad();
        return {reinterpret_cast<T*>(grad.data()), grad.size() / sizeof(T)};
    }
};

// Shared-ownership handle over a dense row-major buffer. Copying a Tensor
// copies the handle, not the storage.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(Shape shape, DType dt = DType::F32, bool requires_grad = false);
    static Tensor full(Shape shape, double value, DType dt = DType::F32);
    static Tensor scalar(double value, DType dt = DType::F32);
    static Tensor from(Shape shape, const std::vector<float>& vals);
    static Tensor from(Shape shape, const std::vector<double>& vals);
    static Tensor randn(Shape shape, DType dt, const rng::Stream& stream, double stddev = 1.0);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int64_t dim(size_t i) const { return impl_->shape.at(i); }
    size_t rank() const { return impl_->shape.size(); }
    int64_t numel() const { return impl_->numel(); }
    DType dtype() const { return impl_->dtype; }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool v);

    template <typename T> std::span<T> vals() { return impl_->vals<T>(); }
    template <typename T> std::span<const T> vals() const {
        return static_cast<const TensorImpl&>(*impl_).vals<T>();
    }

    // Convenience element access for tests and small readers (any dtype).
    double at(std::initializer_list<int64_t> idx) const;
    double flat(int64_t i) const;
    double item() const; // scalar tensors only

    bool has_grad() const { return impl_->has_grad(); }
    template <typename T> std::span<T> grad_vals() { return impl_->grads<T>(); }
    double grad_flat(int64_t i) const;
    void zero_grad() { impl_->grad.clear(); }

    // Copy of the values with no graph attached.
    Tensor detach() const;
    Tensor to(DType dt) const;

    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

  private:
    std::shared_ptr<TensorImpl> impl_;
};

// Reverse-mode sweep from a scalar loss. Visits each recorded node exactly
// once in reverse topological order; leaves with requires_grad accumulate
// their gradients (across multiple backward calls on separate graphs).
void backward(const Tensor& loss);

// While alive, ops do not record tape nodes (evaluation mode).
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

bool grad_enabled();

// dtype dispatch helper: f receives a value-initialized T as a tag.
template <typename F> decltype(auto) dispatch(DType dt, F&& f) {
    if (dt == DType::F32) {
        return f(float{});
    }
    return f(double{});
}

[[noreturn]] void fail(const std::string& msg);

} // namespace moelab
