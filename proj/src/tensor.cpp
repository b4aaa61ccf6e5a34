#include "tensor.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace moelab {

const char* dtype_name(DType dt) { return dt == DType::F32 ? "f32" : "f64"; }

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << ")";
    return os.str();
}

std::vector<int64_t> row_major_strides(const Shape& s) {
    std::vector<int64_t> st(s.size());
    int64_t acc = 1;
    for (size_t i = s.size(); i-- > 0;) {
        st[i] = acc;
        acc *= s[i];
    }
    return st;
}

void fail(const std::string& msg) { throw std::runtime_error(msg); }

void TensorImpl::ensure_grad() {
    if (grad.empty()) {
        grad.assign(data.size(), std::byte{0});
    }
}

static std::shared_ptr<TensorImpl> make_impl(Shape shape, DType dt) {
    for (int64_t d : shape) {
        if (d < 0) fail("tensor: negative extent in shape " + shape_str(shape));
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->dtype = dt;
    impl->data.assign(static_cast<size_t>(shape_numel(shape)) * dtype_size(dt), std::byte{0});
    impl->shape = std::move(shape);
    return impl;
}

Tensor Tensor::zeros(Shape shape, DType dt, bool requires_grad) {
    Tensor t(make_impl(std::move(shape), dt));
    t.impl()->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::full(Shape shape, double value, DType dt) {
    Tensor t(make_impl(std::move(shape), dt));
    dispatch(dt, [&](auto tag) {
        using T = decltype(tag);
        auto v = t.vals<T>();
        std::fill(v.begin(), v.end(), static_cast<T>(value));
    });
    return t;
}

Tensor Tensor::scalar(double value, DType dt) { return full({}, value, dt); }

Tensor Tensor::from(Shape shape, const std::vector<float>& vals) {
    if (shape_numel(shape) != static_cast<int64_t>(vals.size()))
        fail("tensor: " + std::to_string(vals.size()) + " values for shape " + shape_str(shape));
    Tensor t(make_impl(std::move(shape), DType::F32));
    std::copy(vals.begin(), vals.end(), t.vals<float>().begin());
    return t;
}

Tensor Tensor::from(Shape shape, const std::vector<double>& vals) {
    if (shape_numel(shape) != static_cast<int64_t>(vals.size()))
        fail("tensor: " + std::to_string(vals.size()) + " values for shape " + shape_str(shape));
    Tensor t(make_impl(std::move(shape), DType::F64));
    std::copy(vals.begin(), vals.end(), t.vals<double>().begin());
    return t;
}

Tensor Tensor::randn(Shape shape, DType dt, const rng::Stream& stream, double stddev) {
    Tensor t(make_impl(std::move(shape), dt));
    dispatch(dt, [&](auto tag) {
        using T = decltype(tag);
        auto v = t.vals<T>();
        for (size_t i = 0; i < v.size(); ++i) {
            v[i] = static_cast<T>(stream.normal(i) * stddev);
        }
    });
    return t;
}

Tensor& Tensor::set_requires_grad(bool v) {
    if (v && impl_->node) fail("set_requires_grad: tensor is not a leaf");
    impl_->requires_grad = v;
    return *this;
}

double Tensor::flat(int64_t i) const {
    return dispatch(dtype(), [&](auto tag) {
        using T = decltype(tag);
        return static_cast<double>(vals<T>()[static_cast<size_t>(i)]);
    });
}

double Tensor::at(std::initializer_list<int64_t> idx) const {
    const Shape& s = shape();
    if (idx.size() != s.size()) fail("at: rank mismatch for shape " + shape_str(s));
    auto st = row_major_strides(s);
    int64_t off = 0;
    size_t d = 0;
    for (int64_t i : idx) {
        if (i < 0 || i >= s[d]) fail("at: index out of range");
        off += i * st[d];
        ++d;
    }
    return flat(off);
}

double Tensor::item() const {
    if (numel() != 1) fail("item: tensor has " + std::to_string(numel()) + " elements");
    return flat(0);
}

double Tensor::grad_flat(int64_t i) const {
    if (!impl_->has_grad()) fail("grad_flat: no gradient present");
    return dispatch(dtype(), [&](auto tag) {
        using T = decltype(tag);
        return static_cast<double>(
            reinterpret_cast<const T*>(impl_->grad.data())[static_cast<size_t>(i)]);
    });
}

Tensor Tensor::detach() const {
    Tensor t(make_impl(shape(), dtype()));
    t.impl()->data = impl_->data;
    return t;
}

Tensor Tensor::to(DType dt) const {
    if (dt == dtype()) return detach();
    Tensor t(make_impl(shape(), dt));
    dispatch(dt, [&](auto dtag) {
        using D = decltype(dtag);
        auto out = t.vals<D>();
        dispatch(dtype(), [&](auto stag) {
            using S = decltype(stag);
            auto in = vals<S>();
            for (size_t i = 0; i < in.size(); ++i) out[i] = static_cast<D>(in[i]);
        });
    });
    return t;
}

namespace {
thread_local bool g_grad_enabled = true;
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

void backward(const Tensor& loss) {
    if (!loss.defined()) fail("backward: undefined tensor");
    auto root = loss.impl();
    if (root->numel() != 1) {
        fail("backward: loss must be scalar, got shape " + shape_str(root->shape));
    }
    if (!root->node && !root->requires_grad) {
        fail("backward: tensor is detached from any graph");
    }
    if (root->backward_ran) {
        fail("backward: already called on this graph");
    }

    // Iterative postorder DFS; children land before parents.
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> visited;
    std::vector<std::pair<TensorImpl*, size_t>> stack;
    visited.insert(root.get());
    stack.emplace_back(root.get(), 0);
    while (!stack.empty()) {
        auto& [t, cursor] = stack.back();
        if (t->node && cursor < t->node->inputs.size()) {
            TensorImpl* child = t->node->inputs[cursor].get();
            ++cursor;
            if (child->node && !visited.count(child)) {
                visited.insert(child);
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(t);
            stack.pop_back();
        }
    }

    dispatch(root->dtype, [&](auto tag) {
        using T = decltype(tag);
        root->grads<T>()[0] = static_cast<T>(1);
    });

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* t = *it;
        if (t->node) {
            t->node->backward(*t);
        }
    }
    root->backward_ran = true;
}

} // namespace moelab
