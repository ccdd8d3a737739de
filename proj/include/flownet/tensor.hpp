#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace flownet {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

// Row-major strides, in elements.
inline std::vector<std::size_t> row_major_strides(const Shape& shape) {
    std::vector<std::size_t> s(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
    return s;
}

template <typename T>
struct TensorData {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;  // empty until a tape touches this tensor
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), T(0));
    }
};

// Value-semantics handle over shared storage. Ops produce fresh tensors;
// storage is never mutated after construction except for leaf loading and
// optimizer updates.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() : d_(std::make_shared<TensorData<T>>()) {}

    explicit Tensor(Shape shape, T fill = T(0)) : d_(std::make_shared<TensorData<T>>()) {
        d_->shape = std::move(shape);
        d_->values.assign(numel(d_->shape), fill);
    }

    Tensor(Shape shape, std::vector<T> values) : d_(std::make_shared<TensorData<T>>()) {
        if (values.size() != numel(shape))
            throw std::invalid_argument("tensor: " + std::to_string(values.size()) +
                                        " values for shape " + shape_str(shape));
        d_->shape = std::move(shape);
        d_->values = std::move(values);
    }

    static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

    const Shape& shape() const { return d_->shape; }
    std::size_t rank() const { return d_->shape.size(); }
    std::size_t size() const { return d_->values.size(); }
    std::size_t extent(std::size_t axis) const { return d_->shape.at(axis); }

    const T* data() const { return d_->values.data(); }
    T* data() { return d_->values.data(); }
    const std::vector<T>& values() const { return d_->values; }
    std::vector<T>& values() { return d_->values; }

    T item() const {
        if (size() != 1) throw std::invalid_argument("item: tensor has " + std::to_string(size()) + " elements");
        return d_->values[0];
    }

    bool requires_grad() const { return d_->requires_grad; }
    Tensor& set_requires_grad(bool on) {
        d_->requires_grad = on;
        if (on) d_->ensure_grad();
        return *this;
    }

    const std::vector<T>& grad() const { return d_->grad; }
    std::vector<T>& grad() { return d_->grad; }
    void zero_grad() {
        d_->ensure_grad();
        std::fill(d_->grad.begin(), d_->grad.end(), T(0));
    }

    // Deep copy of values (grad and tape state are not copied).
    Tensor clone() const {
        Tensor out(d_->shape, d_->values);
        return out;
    }

    bool all_finite() const {
        for (T v : d_->values)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    std::shared_ptr<TensorData<T>> ptr() const { return d_; }

private:
    std::shared_ptr<TensorData<T>> d_;
};

// Reverse-mode tape. Records are appended in execution order, which is a
// topological order of the computation, and replayed exactly once in reverse.
// A tape is single-owner: activate it on the constructing thread, run the
// forward pass, call backward once.
template <typename T>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    ~Tape() {
        if (active_ == this) active_ = nullptr;
    }

    class Scope {
    public:
        explicit Scope(Tape& t) : prev_(active_) { active_ = &t; }
        ~Scope() { active_ = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* prev_;
    };

    static Tape* current() { return active_; }

    void record(std::function<void()> backward_fn,
                std::initializer_list<std::shared_ptr<TensorData<T>>> touched) {
        for (const auto& t : touched) {
            t->ensure_grad();
            touched_.push_back(t);
        }
        records_.push_back(std::move(backward_fn));
    }

    std::size_t record_count() const { return records_.size(); }

    void backward(const Tensor<T>& loss) {
        if (consumed_) throw std::runtime_error("backward: tape already consumed");
        if (loss.size() != 1)
            throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
        if (!loss.requires_grad())
            throw std::invalid_argument("backward: loss does not depend on any tracked tensor");
        consumed_ = true;
        for (auto& t : touched_) {
            t->ensure_grad();
            std::fill(t->grad.begin(), t->grad.end(), T(0));
        }
        loss.ptr()->grad[0] = T(1);
        for (std::size_t i = records_.size(); i-- > 0;) records_[i]();
    }

private:
    static inline thread_local Tape* active_ = nullptr;
    std::vector<std::function<void()>> records_;
    std::vector<std::shared_ptr<TensorData<T>>> touched_;
    bool consumed_ = false;
};

// Deterministic RNG used for initialization, synthetic data and shuffling.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    double uniform(double lo, double hi) {
        std::uniform_real_distribution<double> d(lo, hi);
        return d(gen_);
    }
    double normal(double mu, double sigma) {
        std::normal_distribution<double> d(mu, sigma);
        return d(gen_);
    }
    std::uint64_t integer(std::uint64_t bound) {  // [0, bound)
        std::uniform_int_distribution<std::uint64_t> d(0, bound - 1);
        return d(gen_);
    }
    template <typename It>
    void shuffle(It first, It last) {
        std::shuffle(first, last, gen_);
    }
    std::mt19937_64& engine() { return gen_; }

private:
    std::mt19937_64 gen_;
};

#ifndef NDEBUG
template <typename T>
inline void debug_check_finite(const Tensor<T>& t, const char* op) {
    if (!t.all_finite()) throw std::runtime_error(std::string(op) + ": non-finite value produced");
}
#else
template <typename T>
inline void debug_check_finite(const Tensor<T>&, const char*) {}
#endif

}  // namespace flownet
