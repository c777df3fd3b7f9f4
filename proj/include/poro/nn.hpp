#pragma once

#include "poro/diff/ops.hpp"
#include "poro/diff/tape.hpp"

#include <memory>
#include <string>
#include <vector>

namespace poro::nn {

using diff::DTensor;
using diff::Shape;
using diff::Tape;
using diff::Var;

/// Owns named parameters with stable addresses, in creation order (the
/// checkpoint blob order).
class ParamStore {
public:
    DTensor* create(const std::string& name, Shape shape) {
        for (const auto& e : entries_)
            if (e.name == name) throw ArgumentError("ParamStore: duplicate parameter " + name);
        entries_.push_back({name, std::make_unique<DTensor>(std::move(shape))});
        entries_.back().tensor->set_requires_grad(true);
        return entries_.back().tensor.get();
    }

    DTensor* get(const std::string& name) {
        for (auto& e : entries_)
            if (e.name == name) return e.tensor.get();
        throw ArgumentError("ParamStore: unknown parameter " + name);
    }

    std::vector<DTensor*> all() const {
        std::vector<DTensor*> out;
        for (const auto& e : entries_) out.push_back(e.tensor.get());
        return out;
    }

    std::vector<std::pair<std::string, const DTensor*>> named() const {
        std::vector<std::pair<std::string, const DTensor*>> out;
        for (const auto& e : entries_) out.emplace_back(e.name, e.tensor.get());
        return out;
    }

    void zero_grads() {
        for (auto& e : entries_) e.tensor->zero_grad();
    }

private:
    struct Entry {
        std::string name;
        std::unique_ptr<DTensor> tensor;
    };
    std::vector<Entry> entries_;
};

struct Dense {
    DTensor* w = nullptr;  // (in, out)
    DTensor* b = nullptr;  // (out)

    static Dense make(ParamStore& ps, const std::string& name, int in, int out, Rng& rng) {
        Dense d;
        d.w = ps.create(name + ".w", {in, out});
        d.b = ps.create(name + ".b", {out});
        diff::init_he_uniform(*d.w, in, rng);
        return d;
    }

    Var operator()(Tape& t, Var x) const { return diff::bias_add(diff::matmul(x, t.leaf(*w)), t.leaf(*b), 1); }
};

struct Conv {
    DTensor* w = nullptr;  // (oc, ic, k, k[, k])
    DTensor* b = nullptr;  // (oc)
    int stride = 1, pad = 0, rank = 2;

    static Conv make(ParamStore& ps, const std::string& name, int ic, int oc, int k, int stride, int pad,
                     int rank, Rng& rng) {
        Conv c;
        Shape ws = {oc, ic};
        std::int64_t fan_in = ic;
        for (int a = 0; a < rank; ++a) {
            ws.push_back(k);
            fan_in *= k;
        }
        c.w = ps.create(name + ".w", std::move(ws));
        c.b = ps.create(name + ".b", {oc});
        c.stride = stride;
        c.pad = pad;
        c.rank = rank;
        diff::init_he_uniform(*c.w, fan_in, rng);
        return c;
    }

    Var operator()(Tape& t, Var x) const {
        Var y = rank == 2 ? diff::conv2d(x, t.leaf(*w), stride, pad) : diff::conv3d(x, t.leaf(*w), stride, pad);
        return diff::bias_add(y, t.leaf(*b), 1);
    }
};

struct ConvT {
    DTensor* w = nullptr;  // (cin, cout, k, k[, k])
    DTensor* b = nullptr;  // (cout)
    int stride = 1, pad = 0, rank = 2;

    static ConvT make(ParamStore& ps, const std::string& name, int cin, int cout, int k, int stride, int pad,
                      int rank, Rng& rng) {
        ConvT c;
        Shape ws = {cin, cout};
        std::int64_t fan_in = cin;
        for (int a = 0; a < rank; ++a) {
            ws.push_back(k);
            fan_in *= k;
        }
        c.w = ps.create(name + ".w", std::move(ws));
        c.b = ps.create(name + ".b", {cout});
        c.stride = stride;
        c.pad = pad;
        c.rank = rank;
        diff::init_he_uniform(*c.w, fan_in, rng);
        return c;
    }

    Var operator()(Tape& t, Var z) const {
        Var y = rank == 2 ? diff::conv_transpose2d(z, t.leaf(*w), stride, pad)
                          : diff::conv_transpose3d(z, t.leaf(*w), stride, pad);
        return diff::bias_add(y, t.leaf(*b), 1);
    }
};

}  // namespace poro::nn
