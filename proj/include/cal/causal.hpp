#pragma once

#include <algorithm>
#include <cstring>
#include <functional>
#include <map>
#include <queue>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "cal/errors.hpp"

namespace cal {

// ---------------------------------------------------------------------------
// Node values are booleans or f64 vectors. Vector equality is bitwise, so
// two values are equal only when every double has the same bit pattern.
// ---------------------------------------------------------------------------

using NodeValue = std::variant<bool, std::vector<double>>;

inline bool value_equal(const NodeValue& a, const NodeValue& b) {
    if (a.index() != b.index()) return false;
    if (std::holds_alternative<bool>(a)) return std::get<bool>(a) == std::get<bool>(b);
    const auto& va = std::get<std::vector<double>>(a);
    const auto& vb = std::get<std::vector<double>>(b);
    if (va.size() != vb.size()) return false;
    return va.empty() ||
           std::memcmp(va.data(), vb.data(), va.size() * sizeof(double)) == 0;
}

inline bool value_bool(const NodeValue& v) {
    if (!std::holds_alternative<bool>(v))
        throw ValidationError("expected a boolean node value");
    return std::get<bool>(v);
}

// ---------------------------------------------------------------------------
// Node functions live in a registry keyed by name so models serialize as
// plain JSON and deserialize back to executable graphs.
// ---------------------------------------------------------------------------

using NodeFn = std::function<NodeValue(const std::vector<NodeValue>&)>;

class FunctionRegistry {
public:
    static FunctionRegistry& instance() {
        static FunctionRegistry reg;
        return reg;
    }

    void add(const std::string& name, std::size_t arity, NodeFn fn) {
        fns_[name] = {arity, std::move(fn)};
    }

    bool contains(const std::string& name) const { return fns_.count(name) > 0; }

    std::size_t arity(const std::string& name) const { return entry(name).arity; }

    NodeValue call(const std::string& name, const std::vector<NodeValue>& args) const {
        const Entry& e = entry(name);
        if (args.size() != e.arity)
            throw ValidationError("function " + name + " expects " + std::to_string(e.arity) +
                                  " parents, got " + std::to_string(args.size()));
        return e.fn(args);
    }

private:
    struct Entry {
        std::size_t arity;
        NodeFn fn;
    };

    const Entry& entry(const std::string& name) const {
        auto it = fns_.find(name);
        if (it == fns_.end()) throw ValidationError("unknown node function: " + name);
        return it->second;
    }

    FunctionRegistry() {
        auto eq = [](const std::vector<NodeValue>& a) {
            return NodeValue{value_equal(a[0], a[1])};
        };
        add("eq", 2, eq);
        add("and", 2, [](const std::vector<NodeValue>& a) {
            return NodeValue{value_bool(a[0]) && value_bool(a[1])};
        });
        add("or", 2, [](const std::vector<NodeValue>& a) {
            return NodeValue{value_bool(a[0]) || value_bool(a[1])};
        });
        add("copy", 1, [](const std::vector<NodeValue>& a) { return a[0]; });
        // (a == b) && (c == d), the left/right conjuncts of the two-clause task
        add("eq_and_eq", 4, [](const std::vector<NodeValue>& a) {
            return NodeValue{value_equal(a[0], a[1]) && value_equal(a[2], a[3])};
        });
        // (a == b) || (c == d)
        add("eq_or_eq", 4, [](const std::vector<NodeValue>& a) {
            return NodeValue{value_equal(a[0], a[1]) || value_equal(a[2], a[3])};
        });
        // bool == (b == c), the left-equality output
        add("eq_of_eq", 3, [](const std::vector<NodeValue>& a) {
            return NodeValue{value_bool(a[0]) == value_equal(a[1], a[2])};
        });
        // (v == b) == (c == d), the identity-of-first output
        add("first_eq_then_eq", 4, [](const std::vector<NodeValue>& a) {
            return NodeValue{value_equal(a[0], a[1]) == value_equal(a[2], a[3])};
        });
    }

    std::map<std::string, Entry> fns_;
};

// ---------------------------------------------------------------------------
// CausalModel: a DAG over named nodes. Input nodes read a contiguous slice
// of the flat task input vector; other nodes apply their registered function
// to parent values. An intervention pins a node to a value and its function
// is never evaluated.
// ---------------------------------------------------------------------------

enum class NodeKind { input, inner, output };

inline const char* to_string(NodeKind k) {
    switch (k) {
        case NodeKind::input: return "input";
        case NodeKind::inner: return "inner";
        default: return "output";
    }
}

inline NodeKind node_kind_from(const std::string& s) {
    if (s == "input") return NodeKind::input;
    if (s == "inner") return NodeKind::inner;
    if (s == "output") return NodeKind::output;
    throw ValidationError("unknown node kind: " + s);
}

struct Node {
    std::string id;
    NodeKind kind = NodeKind::inner;
    std::vector<std::string> parents;
    std::string fn;           // empty for inputs
    std::size_t lo = 0;       // input slice [lo, hi) of the flat task input
    std::size_t hi = 0;
};

using Intervention = std::map<std::string, NodeValue>;

class CausalModel {
public:
    std::string name;

    void add_node(Node n) {
        if (index_.count(n.id)) throw ValidationError("duplicate node id: " + n.id);
        index_[n.id] = nodes_.size();
        nodes_.push_back(std::move(n));
    }

    const std::vector<Node>& nodes() const { return nodes_; }

    const Node& node(const std::string& id) const {
        auto it = index_.find(id);
        if (it == index_.end()) throw ValidationError("unknown node id: " + id);
        return nodes_[it->second];
    }

    bool has_node(const std::string& id) const { return index_.count(id) > 0; }

    std::vector<std::string> inner_ids() const {
        std::vector<std::string> out;
        for (const auto& n : nodes_)
            if (n.kind == NodeKind::inner) out.push_back(n.id);
        std::sort(out.begin(), out.end());
        return out;
    }

    std::string output_id() const {
        for (const auto& n : nodes_)
            if (n.kind == NodeKind::output) return n.id;
        throw ValidationError("model has no output node: " + name);
    }

    std::size_t input_dim() const {
        std::size_t d = 0;
        for (const auto& n : nodes_)
            if (n.kind == NodeKind::input) d = std::max(d, n.hi);
        return d;
    }

    // Kahn's algorithm with a deterministic tie-break: among ready nodes,
    // inputs come before inner nodes before outputs, then lexicographic id.
    std::vector<std::string> topo_order() const {
        using Key = std::pair<int, std::string>;
        auto key = [this](std::size_t i) {
            return Key{static_cast<int>(nodes_[i].kind), nodes_[i].id};
        };
        std::vector<std::size_t> indegree(nodes_.size(), 0);
        std::vector<std::vector<std::size_t>> children(nodes_.size());
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            for (const auto& pid : nodes_[i].parents) {
                auto it = index_.find(pid);
                if (it == index_.end())
                    throw ValidationError("node " + nodes_[i].id + " has unknown parent " + pid);
                children[it->second].push_back(i);
                ++indegree[i];
            }
        }
        std::priority_queue<std::pair<Key, std::size_t>, std::vector<std::pair<Key, std::size_t>>,
                            std::greater<>>
            ready;
        for (std::size_t i = 0; i < nodes_.size(); ++i)
            if (indegree[i] == 0) ready.push({key(i), i});
        std::vector<std::string> order;
        order.reserve(nodes_.size());
        while (!ready.empty()) {
            const std::size_t i = ready.top().second;
            ready.pop();
            order.push_back(nodes_[i].id);
            for (std::size_t c : children[i])
                if (--indegree[c] == 0) ready.push({key(c), c});
        }
        if (order.size() != nodes_.size())
            throw ValidationError("model has a cycle: " + name);
        return order;
    }

    void validate() const {
        bool has_output = false;
        for (const auto& n : nodes_) {
            if (n.kind == NodeKind::input) {
                if (!n.parents.empty())
                    throw ValidationError("input node " + n.id + " must have no parents");
                if (n.lo >= n.hi)
                    throw ValidationError("input node " + n.id + " has an empty slice");
            } else {
                if (!FunctionRegistry::instance().contains(n.fn))
                    throw ValidationError("node " + n.id + " uses unknown function " + n.fn);
                if (FunctionRegistry::instance().arity(n.fn) != n.parents.size())
                    throw ValidationError("node " + n.id + " parent count does not match " + n.fn);
            }
            if (n.kind == NodeKind::output) has_output = true;
            for (const auto& pid : n.parents)
                if (!index_.count(pid))
                    throw ValidationError("node " + n.id + " has unknown parent " + pid);
        }
        if (!has_output) throw ValidationError("model has no output node: " + name);
        topo_order();  // throws on cycles
    }

    // Full setting of every node under input x and intervention iv, computed
    // along the given topological order.
    std::unordered_map<std::string, NodeValue> evaluate_in_order(
        const std::vector<std::string>& order, const std::vector<double>& x,
        const Intervention& iv) const {
        std::unordered_map<std::string, NodeValue> setting;
        setting.reserve(nodes_.size());
        for (const auto& id : order) {
            const Node& n = node(id);
            auto pinned = iv.find(id);
            if (pinned != iv.end()) {
                setting[id] = pinned->second;
                continue;
            }
            if (n.kind == NodeKind::input) {
                if (n.hi > x.size())
                    throw ValidationError("input vector too short for node " + id);
                setting[id] = std::vector<double>(x.begin() + static_cast<std::ptrdiff_t>(n.lo),
                                                  x.begin() + static_cast<std::ptrdiff_t>(n.hi));
                continue;
            }
            std::vector<NodeValue> args;
            args.reserve(n.parents.size());
            for (const auto& pid : n.parents) args.push_back(setting.at(pid));
            setting[id] = FunctionRegistry::instance().call(n.fn, args);
        }
        return setting;
    }

    std::unordered_map<std::string, NodeValue> evaluate(const std::vector<double>& x,
                                                        const Intervention& iv = {}) const {
        return evaluate_in_order(topo_order(), x, iv);
    }

    // Value of a single node; computation stops once the node is set.
    NodeValue run_until(const std::vector<double>& x, const Intervention& iv,
                        const std::string& target,
                        const std::vector<std::string>* order = nullptr) const {
        node(target);  // throws on unknown id
        const std::vector<std::string> local = order ? std::vector<std::string>{} : topo_order();
        const std::vector<std::string>& ord = order ? *order : local;
        std::unordered_map<std::string, NodeValue> setting;
        setting.reserve(nodes_.size());
        for (const auto& id : ord) {
            const Node& n = node(id);
            auto pinned = iv.find(id);
            if (pinned != iv.end()) {
                setting[id] = pinned->second;
            } else if (n.kind == NodeKind::input) {
                if (n.hi > x.size())
                    throw ValidationError("input vector too short for node " + id);
                setting[id] = std::vector<double>(x.begin() + static_cast<std::ptrdiff_t>(n.lo),
                                                  x.begin() + static_cast<std::ptrdiff_t>(n.hi));
            } else {
                std::vector<NodeValue> args;
                args.reserve(n.parents.size());
                for (const auto& pid : n.parents) args.push_back(setting.at(pid));
                setting[id] = FunctionRegistry::instance().call(n.fn, args);
            }
            if (id == target) return setting[id];
        }
        throw ValidationError("run_until never reached node " + target);
    }

    // Binary class label of the output node under x and iv.
    int output_label(const std::vector<double>& x, const Intervention& iv = {},
                     const std::vector<std::string>* order = nullptr) const {
        return value_bool(run_until(x, iv, output_id(), order)) ? 1 : 0;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["name"] = name;
        nlohmann::json list = nlohmann::json::array();
        for (const auto& n : nodes_) {
            nlohmann::json e;
            e["id"] = n.id;
            e["kind"] = to_string(n.kind);
            e["parents"] = n.parents;
            if (n.kind == NodeKind::input) {
                e["lo"] = n.lo;
                e["hi"] = n.hi;
            } else {
                e["fn"] = n.fn;
            }
            list.push_back(e);
        }
        j["nodes"] = list;
        return j;
    }

    static CausalModel from_json(const nlohmann::json& j) {
        CausalModel m;
        m.name = j.at("name").get<std::string>();
        for (const auto& e : j.at("nodes")) {
            Node n;
            n.id = e.at("id").get<std::string>();
            n.kind = node_kind_from(e.at("kind").get<std::string>());
            n.parents = e.at("parents").get<std::vector<std::string>>();
            if (n.kind == NodeKind::input) {
                n.lo = e.at("lo").get<std::size_t>();
                n.hi = e.at("hi").get<std::size_t>();
            } else {
                n.fn = e.at("fn").get<std::string>();
            }
            m.add_node(std::move(n));
        }
        m.validate();
        return m;
    }

private:
    std::vector<Node> nodes_;
    std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace cal
