#pragma once

#include <memory>

#include "strata/common.hpp"

namespace strata {

// Dense row-major f64 array. Copies are shallow (shared storage); graph ops
// never mutate an existing tensor's storage. `node`/`gen` tie a value to the
// graph that recorded it; tensors without a node are plain constants.
struct Tensor {
    std::shared_ptr<std::vector<double>> store;
    Shape shape;
    bool requires_grad = false;
    int node = -1;
    unsigned gen = 0;

    Tensor() = default;

    i64 size() const { return store ? static_cast<i64>(store->size()) : 0; }
    double* data() { return store->data(); }
    const double* data() const { return store->data(); }
    bool defined() const { return static_cast<bool>(store); }
    i64 dim(size_t i) const { return shape.at(i); }
    size_t ndim() const { return shape.size(); }

    double item() const {
        require(defined() && size() == 1, "item(): tensor is not a scalar, shape ", shape_str(shape));
        return (*store)[0];
    }

    double at(i64 i) const { return (*store)[static_cast<size_t>(i)]; }

    static Tensor zeros(Shape s) {
        Tensor t;
        t.shape = std::move(s);
        t.store = std::make_shared<std::vector<double>>(static_cast<size_t>(numel(t.shape)), 0.0);
        return t;
    }

    static Tensor full(Shape s, double v) {
        Tensor t = zeros(std::move(s));
        for (double& x : *t.store) x = v;
        return t;
    }

    static Tensor scalar(double v) { return full({1}, v); }

    static Tensor from(std::vector<double> v, Shape s) {
        require(static_cast<i64>(v.size()) == numel(s), "from(): ", v.size(),
                " values do not fill shape ", shape_str(s));
        Tensor t;
        t.shape = std::move(s);
        t.store = std::make_shared<std::vector<double>>(std::move(v));
        return t;
    }

    // Deep copy with no graph attachment.
    Tensor clone() const {
        Tensor t;
        t.shape = shape;
        t.store = std::make_shared<std::vector<double>>(*store);
        t.requires_grad = requires_grad;
        return t;
    }
};

// Integer index array used by gather / scatter-add / segment ops. Indices are
// not differentiable, so they live outside the Tensor type.
struct IndexArray {
    std::shared_ptr<std::vector<i64>> store;
    Shape shape;

    IndexArray() = default;
    explicit IndexArray(std::vector<i64> v, Shape s = {}) {
        if (s.empty()) s = {static_cast<i64>(v.size())};
        require(static_cast<i64>(v.size()) == numel(s), "IndexArray: size/shape mismatch");
        store = std::make_shared<std::vector<i64>>(std::move(v));
        shape = std::move(s);
    }
    i64 size() const { return store ? static_cast<i64>(store->size()) : 0; }
    const i64* data() const { return store->data(); }
    i64 at(i64 i) const { return (*store)[static_cast<size_t>(i)]; }
};

}  // namespace strata
