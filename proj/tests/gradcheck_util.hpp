#pragma once

// Random differentiable programs over the op set, evaluated through a small
// interpreter so the same program can be replayed with perturbed leaf values.
// This keeps the finite-difference oracle independent of the autodiff path:
// the numeric gradient only ever reads loss *values*.

#include "cwm/tensor.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace gradcheck {

struct Instr {
    std::string op;           // gelu|sigmoid|softmax|scale|add_leaf|mul_leaf|matmul_leaf|
                              // layernorm|transpose2|reshape_flat|gather0|log_sig|sub_leaf
    int leaf = -1;            // auxiliary leaf index, when used
    int leaf2 = -1;
    double c = 0.0;
    std::vector<std::size_t> indices;
};

struct Program {
    cwm::Shape input_shape;
    std::vector<cwm::Shape> leaf_shapes;  // leaf 0 is the input
    std::vector<Instr> instrs;
};

// Evaluates the program, returning the scalar loss tensor. Leaves are given
// by value; requires_grad is set per leaf by the caller.
template <typename T>
cwm::TensorT<T> eval_program(const Program& prog, const std::vector<cwm::TensorT<T>>& leaves) {
    cwm::TensorT<T> cur = leaves.at(0);
    for (const auto& in : prog.instrs) {
        if (in.op == "gelu") {
            cur = cwm::gelu(cur);
        } else if (in.op == "sigmoid") {
            cur = cwm::sigmoid(cur);
        } else if (in.op == "softmax") {
            cur = cwm::softmax_last(cur);
        } else if (in.op == "scale") {
            cur = cwm::scale(cur, static_cast<T>(in.c));
        } else if (in.op == "add_leaf") {
            cur = cwm::add(cur, leaves.at(in.leaf));
        } else if (in.op == "sub_leaf") {
            cur = cwm::sub(cur, leaves.at(in.leaf));
        } else if (in.op == "mul_leaf") {
            cur = cwm::mul(cur, leaves.at(in.leaf));
        } else if (in.op == "matmul_leaf") {
            cur = cwm::matmul(cur, leaves.at(in.leaf));
        } else if (in.op == "layernorm") {
            cur = cwm::layernorm_last(cur, leaves.at(in.leaf), leaves.at(in.leaf2));
        } else if (in.op == "transpose2") {
            cur = cwm::transpose(cur, {1, 0});
        } else if (in.op == "reshape_flat") {
            cur = cwm::reshape(cur, {cur.numel()});
        } else if (in.op == "gather0") {
            cur = cwm::gather_axis(cur, 0, in.indices);
        } else if (in.op == "scatter0") {
            cur = cwm::scatter_axis(cur, 0, in.indices, leaves.at(in.leaf));
        } else if (in.op == "log_sig") {
            // log of a positive quantity built from the op set
            cur = cwm::log(cwm::add(cwm::sigmoid(cur), leaves.at(in.leaf)));
        } else {
            throw std::runtime_error("gradcheck: unknown instr " + in.op);
        }
    }
    return cwm::mean_all(cwm::mul(cur, cur));
}

inline Program make_random_program(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto pick = [&rng](int lo, int hi) {
        return std::uniform_int_distribution<int>(lo, hi)(rng);
    };

    Program prog;
    cwm::Shape cur{static_cast<std::size_t>(pick(2, 4)), static_cast<std::size_t>(pick(2, 4))};
    prog.input_shape = cur;
    prog.leaf_shapes.push_back(cur);

    const int n_ops = pick(3, 7);
    for (int s = 0; s < n_ops; ++s) {
        const int choice = pick(0, 10);
        Instr in;
        switch (choice) {
            case 0: in.op = "gelu"; break;
            case 1: in.op = "sigmoid"; break;
            case 2: in.op = "softmax"; break;
            case 3:
                in.op = "scale";
                in.c = 0.25 + 0.5 * pick(0, 3);
                break;
            case 4:
            case 5: {
                in.op = (choice == 4) ? "add_leaf" : "mul_leaf";
                in.leaf = static_cast<int>(prog.leaf_shapes.size());
                // broadcast over the last axis half the time
                if (pick(0, 1) == 0 && cur.size() > 1)
                    prog.leaf_shapes.push_back({cur.back()});
                else
                    prog.leaf_shapes.push_back(cur);
                break;
            }
            case 6: {
                if (cur.size() != 2) { in.op = "gelu"; break; }
                in.op = "matmul_leaf";
                in.leaf = static_cast<int>(prog.leaf_shapes.size());
                const std::size_t n = static_cast<std::size_t>(pick(2, 4));
                prog.leaf_shapes.push_back({cur.back(), n});
                cur = {cur[0], n};
                break;
            }
            case 7: {
                in.op = "layernorm";
                in.leaf = static_cast<int>(prog.leaf_shapes.size());
                prog.leaf_shapes.push_back({cur.back()});
                in.leaf2 = static_cast<int>(prog.leaf_shapes.size());
                prog.leaf_shapes.push_back({cur.back()});
                break;
            }
            case 8:
                if (cur.size() != 2) { in.op = "sigmoid"; break; }
                in.op = "transpose2";
                std::swap(cur[0], cur[1]);
                break;
            case 9: {
                in.op = "gather0";
                const std::size_t k = static_cast<std::size_t>(pick(1, static_cast<int>(cur[0])));
                for (std::size_t i = 0; i < k; ++i)
                    in.indices.push_back(static_cast<std::size_t>(
                        pick(0, static_cast<int>(cur[0]) - 1)));
                // gather tolerates repeats; scatter below needs distinct rows
                std::sort(in.indices.begin(), in.indices.end());
                in.indices.erase(std::unique(in.indices.begin(), in.indices.end()),
                                 in.indices.end());
                cur[0] = in.indices.size();
                break;
            }
            case 10: {
                in.op = "log_sig";
                in.leaf = static_cast<int>(prog.leaf_shapes.size());
                prog.leaf_shapes.push_back({1});  // positive offset, filled below
                break;
            }
        }
        prog.instrs.push_back(in);
    }
    return prog;
}

template <typename T>
std::vector<cwm::TensorT<T>> make_leaves(const Program& prog, std::uint64_t seed,
                                         bool requires_grad) {
    std::mt19937_64 rng(seed ^ 0x5eedf00dULL);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    std::vector<cwm::TensorT<T>> leaves;
    for (std::size_t li = 0; li < prog.leaf_shapes.size(); ++li) {
        const auto& s = prog.leaf_shapes[li];
        std::vector<T> data(cwm::shape_numel(s));
        for (auto& v : data) v = static_cast<T>(dist(rng));
        // "log_sig" offsets must keep the log argument comfortably positive
        bool is_offset = false;
        for (const auto& in : prog.instrs)
            if (in.op == "log_sig" && in.leaf == static_cast<int>(li)) is_offset = true;
        if (is_offset)
            for (auto& v : data) v = static_cast<T>(0.5 + 0.25 * std::abs(double(v)));
        leaves.emplace_back(s, std::move(data), requires_grad);
    }
    return leaves;
}

struct GradcheckResult {
    double max_rel_err = 0.0;
    std::size_t checked = 0;
};

// Central finite differences against the autodiff gradient. The relative
// error metric is |a - n| / max(1, |a|, |n|).
template <typename T>
GradcheckResult run_gradcheck(std::uint64_t seed, double h) {
    const Program prog = make_random_program(seed);
    auto leaves = make_leaves<T>(prog, seed, true);
    auto loss = eval_program(prog, leaves);
    cwm::backward(loss);

    GradcheckResult res;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        auto analytic = leaves[li].grad();
        for (std::size_t i = 0; i < leaves[li].numel(); ++i) {
            auto lp = make_leaves<T>(prog, seed, false);
            lp[li].data_mut()[i] += static_cast<T>(h);
            const double fp = static_cast<double>(eval_program(prog, lp).item());
            auto lm = make_leaves<T>(prog, seed, false);
            lm[li].data_mut()[i] -= static_cast<T>(h);
            const double fm = static_cast<double>(eval_program(prog, lm).item());
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = static_cast<double>(analytic[i]);
            const double rel =
                std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
            res.max_rel_err = std::max(res.max_rel_err, rel);
            ++res.checked;
        }
    }
    return res;
}

}  // namespace gradcheck
