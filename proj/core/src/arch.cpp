#include "cascade/arch.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>

namespace cascade {

const char* Layer::kind() const {
    struct Visitor {
        const char* operator()(const ConvDesc&) const { return "conv"; }
        const char* operator()(const DepthwiseConvDesc&) const { return "dwconv"; }
        const char* operator()(const DenseDesc&) const { return "dense"; }
        const char* operator()(const BatchNormDesc&) const { return "bn"; }
        const char* operator()(const ReluDesc&) const { return "relu"; }
        const char* operator()(const PoolDesc&) const { return "pool"; }
        const char* operator()(const ClassifierDesc&) const { return "classifier"; }
        const char* operator()(const BlockDesc&) const { return "block"; }
    };
    return std::visit(Visitor{}, desc);
}

namespace {

void collect_convs(const std::vector<Layer>& layers, std::vector<const Layer*>& out) {
    for (const auto& l : layers) {
        if (l.as<ConvDesc>()) out.push_back(&l);
        if (const auto* b = l.as<BlockDesc>()) {
            collect_convs(b->body, out);
            collect_convs(b->shortcut, out);
        }
    }
}

const Layer* find_in(const std::vector<Layer>& layers, std::size_t id) {
    for (const auto& l : layers) {
        if (l.id == id) return &l;
        if (const auto* b = l.as<BlockDesc>()) {
            if (const auto* f = find_in(b->body, id)) return f;
            if (const auto* f = find_in(b->shortcut, id)) return f;
        }
    }
    return nullptr;
}

}  // namespace

std::vector<const Layer*> ArchSpec::conv_layers() const {
    std::vector<const Layer*> out;
    collect_convs(layers, out);
    return out;
}

const Layer* ArchSpec::find(std::size_t id) const { return find_in(layers, id); }

namespace {

class KeyValues {
public:
    KeyValues(const std::vector<std::string>& tokens, int line) : line_(line) {
        for (std::size_t i = 1; i < tokens.size(); ++i) {
            const auto eq = tokens[i].find('=');
            if (eq == std::string::npos || eq == 0)
                throw ParseError("expected key=value, got '" + tokens[i] + "'", line);
            const auto key = tokens[i].substr(0, eq);
            if (!values_.emplace(key, tokens[i].substr(eq + 1)).second)
                throw ParseError("duplicate key '" + key + "'", line);
        }
    }

    std::size_t count(const std::string& key, std::optional<std::size_t> fallback = std::nullopt) {
        auto it = values_.find(key);
        if (it == values_.end()) {
            if (!fallback) throw ParseError("missing required key '" + key + "'", line_);
            return *fallback;
        }
        used_.push_back(key);
        std::size_t pos = 0;
        unsigned long long v = 0;
        try {
            v = std::stoull(it->second, &pos);
        } catch (const std::exception&) {
            pos = 0;
        }
        if (pos != it->second.size() || it->second.empty() || it->second[0] == '-' || v == 0)
            throw ParseError("key '" + key + "' must be a positive integer, got '" + it->second + "'", line_);
        return static_cast<std::size_t>(v);
    }

    bool flag(const std::string& key, bool fallback) {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        used_.push_back(key);
        if (it->second == "true" || it->second == "1") return true;
        if (it->second == "false" || it->second == "0") return false;
        throw ParseError("key '" + key + "' must be true or false, got '" + it->second + "'", line_);
    }

    std::string text(const std::string& key, const std::string& fallback) {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        used_.push_back(key);
        return it->second;
    }

    Padding padding(Padding fallback) {
        const auto v = text("pad", fallback == Padding::same ? "same" : "valid");
        if (v == "same") return Padding::same;
        if (v == "valid") return Padding::valid;
        throw ParseError("pad must be same or valid, got '" + v + "'", line_);
    }

    void finish() const {
        for (const auto& [k, v] : values_)
            if (std::find(used_.begin(), used_.end(), k) == used_.end())
                throw ParseError("unknown key '" + k + "'", line_);
    }

private:
    int line_;
    std::map<std::string, std::string> values_;
    std::vector<std::string> used_;
};

std::vector<std::string> tokenize(const std::string& s) {
    std::istringstream is(s);
    std::vector<std::string> out;
    for (std::string t; is >> t;) out.push_back(t);
    return out;
}

ConvDesc parse_conv(KeyValues& kv) {
    ConvDesc c;
    c.kernel = kv.count("k");
    c.in = kv.count("in");
    c.out = kv.count("out");
    c.stride = kv.count("stride", 1);
    c.padding = kv.padding(Padding::same);
    c.maskable = kv.flag("maskable", true);
    return c;
}

Layer parse_line(const std::vector<std::string>& tok, int line) {
    KeyValues kv(tok, line);
    Layer layer;
    layer.line = line;
    layer.name = kv.text("name", "");
    const auto& kind = tok[0];
    if (kind == "conv") {
        layer.desc = parse_conv(kv);
    } else if (kind == "dwconv") {
        DepthwiseConvDesc d;
        d.kernel = kv.count("k");
        d.channels = kv.count("c");
        d.stride = kv.count("stride", 1);
        d.padding = kv.padding(Padding::same);
        layer.desc = d;
    } else if (kind == "dense") {
        layer.desc = DenseDesc{kv.count("in"), kv.count("out")};
    } else if (kind == "bn") {
        layer.desc = BatchNormDesc{};
    } else if (kind == "relu") {
        layer.desc = ReluDesc{};
    } else if (kind == "pool") {
        PoolDesc p;
        const auto k = kv.text("kind", "max");
        if (k == "max") p.kind = PoolKind::max;
        else if (k == "avg") p.kind = PoolKind::avg;
        else if (k == "global") p.kind = PoolKind::global;
        else throw ParseError("pool kind must be max, avg or global, got '" + k + "'", line);
        if (p.kind != PoolKind::global) {
            p.kernel = kv.count("k");
            p.stride = kv.count("stride", p.kernel);
            p.padding = kv.padding(Padding::valid);
        }
        layer.desc = p;
    } else if (kind == "classifier") {
        layer.desc = ClassifierDesc{};
    } else if (kind == "block") {
        kv.flag("projection", false);  // checked against the shortcut after the body is read
        layer.desc = BlockDesc{};
    } else {
        throw ParseError("unknown layer kind '" + kind + "'", line);
    }
    kv.finish();
    return layer;
}

void assign_ids(std::vector<Layer>& layers, std::size_t& next) {
    for (auto& l : layers) {
        l.id = next++;
        if (l.name.empty()) l.name = std::string(l.kind()) + std::to_string(l.id);
        if (auto* b = std::get_if<BlockDesc>(&l.desc)) {
            assign_ids(b->body, next);
            assign_ids(b->shortcut, next);
        }
    }
}

// Walks the network tracking declared and kept channel counts. Used both to
// validate shapes at parse time and to count stats.
struct Walker {
    const FilterMask* mask = nullptr;

    struct State {
        FeatureShape shape;
        std::size_t kept = 0;  // effective channel count under the mask
    };

    std::size_t kept_out(const Layer& l, std::size_t declared) const {
        if (!mask) return declared;
        const auto* m = mask->find(l.id);
        if (!m || !m->maskable) return declared;
        if (m->keep.size() != declared)
            throw ShapeError("mask for layer " + l.name + " has " + std::to_string(m->keep.size()) +
                             " entries, layer has " + std::to_string(declared) + " filters");
        return m->kept();
    }

    LayerStats visit(const Layer& l, State& s) const {
        LayerStats st;
        st.layer_id = l.id;
        st.name = l.name;
        st.kind = l.kind();
        auto fail = [&](const std::string& what) { throw ParseError(l.name + ": " + what, l.line); };
        if (const auto* c = l.as<ConvDesc>()) {
            if (c->in != s.shape.c)
                fail("conv expects " + std::to_string(c->in) + " input channels, previous layer provides " +
                     std::to_string(s.shape.c));
            std::size_t oh = 0, ow = 0;
            try {
                oh = conv_out_extent(s.shape.h, c->kernel, c->stride, c->padding);
                ow = conv_out_extent(s.shape.w, c->kernel, c->stride, c->padding);
            } catch (const ShapeError& e) {
                fail(e.what());
            }
            const std::size_t kin = s.kept, kout = kept_out(l, c->out);
            st.params = static_cast<std::int64_t>(c->kernel * c->kernel * kin * kout);
            st.flops = static_cast<std::int64_t>(oh * ow) * st.params;
            s.shape = {c->out, oh, ow};
            s.kept = kout;
        } else if (const auto* d = l.as<DepthwiseConvDesc>()) {
            if (d->channels != s.shape.c)
                fail("dwconv expects " + std::to_string(d->channels) + " channels, previous layer provides " +
                     std::to_string(s.shape.c));
            std::size_t oh = 0, ow = 0;
            try {
                oh = conv_out_extent(s.shape.h, d->kernel, d->stride, d->padding);
                ow = conv_out_extent(s.shape.w, d->kernel, d->stride, d->padding);
            } catch (const ShapeError& e) {
                fail(e.what());
            }
            st.params = static_cast<std::int64_t>(d->kernel * d->kernel * s.kept);
            st.flops = static_cast<std::int64_t>(oh * ow) * st.params;
            s.shape = {d->channels, oh, ow};
        } else if (const auto* d = l.as<DenseDesc>()) {
            const std::size_t flat = s.shape.c * s.shape.h * s.shape.w;
            if (d->in != flat)
                fail("dense expects " + std::to_string(d->in) + " inputs, previous layer provides " +
                     std::to_string(flat));
            const std::size_t kin = s.kept * s.shape.h * s.shape.w;
            st.params = static_cast<std::int64_t>(kin * d->out);
            st.flops = st.params;
            s.shape = {d->out, 1, 1};
            s.kept = d->out;
        } else if (const auto* p = l.as<PoolDesc>()) {
            if (p->kind == PoolKind::global) {
                s.shape.h = s.shape.w = 1;
            } else {
                try {
                    s.shape.h = conv_out_extent(s.shape.h, p->kernel, p->stride, p->padding);
                    s.shape.w = conv_out_extent(s.shape.w, p->kernel, p->stride, p->padding);
                } catch (const ShapeError& e) {
                    fail(e.what());
                }
            }
        } else if (const auto* b = l.as<BlockDesc>()) {
            const State in = s;
            for (const auto& inner : b->body) {
                st.children.push_back(visit(inner, s));
                st.params += st.children.back().params;
                st.flops += st.children.back().flops;
            }
            State sc = in;
            for (const auto& inner : b->shortcut) {
                st.children.push_back(visit(inner, sc));
                st.params += st.children.back().params;
                st.flops += st.children.back().flops;
            }
            if (!(sc.shape == s.shape))
                fail("residual branch output " + std::to_string(s.shape.c) + "x" + std::to_string(s.shape.h) + "x" +
                     std::to_string(s.shape.w) + " does not match shortcut " + std::to_string(sc.shape.c) + "x" +
                     std::to_string(sc.shape.h) + "x" + std::to_string(sc.shape.w));
            s.kept = std::max(s.kept, sc.kept);
        }
        // bn, relu, classifier: free and shape-preserving
        st.out = s.shape;
        return st;
    }

    ArchStats run(const ArchSpec& arch) const {
        ArchStats out;
        State s{arch.input, arch.input.c};
        for (const auto& l : arch.layers) {
            out.layers.push_back(visit(l, s));
            out.totals.params += out.layers.back().params;
            out.totals.flops += out.layers.back().flops;
        }
        return out;
    }
};

}  // namespace

ArchSpec parse_arch(std::istream& in) {
    ArchSpec arch;
    bool have_input = false;
    Layer* open_block = nullptr;
    bool block_projection = false;
    int block_line = 0;
    auto close_block = [&]() {
        if (!open_block) return;
        const auto& b = std::get<BlockDesc>(open_block->desc);
        if (b.body.empty()) throw ParseError("block has no layers", block_line);
        if (block_projection != !b.shortcut.empty())
            throw ParseError(block_projection ? "block declares projection=true but has no shortcut line"
                                              : "block has a shortcut line but no projection=true",
                             block_line);
        open_block = nullptr;
    };

    std::string raw;
    int line = 0;
    while (std::getline(in, raw)) {
        ++line;
        if (const auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
        const auto tok = tokenize(raw);
        if (tok.empty()) continue;
        const bool indented = raw[0] == ' ' || raw[0] == '\t';
        if (!indented) close_block();

        if (tok[0] == "name") {
            if (tok.size() != 2) throw ParseError("expected 'name <id>'", line);
            arch.name = tok[1];
            continue;
        }
        if (tok[0] == "input") {
            if (indented) throw ParseError("input line cannot be indented", line);
            KeyValues kv(tok, line);
            arch.input = {kv.count("c"), kv.count("h"), kv.count("w")};
            kv.finish();
            have_input = true;
            continue;
        }
        if (!have_input) throw ParseError("layers must follow an 'input c=.. h=.. w=..' line", line);

        if (indented) {
            if (!open_block) throw ParseError("indented line outside a block", line);
            auto& b = std::get<BlockDesc>(open_block->desc);
            if (tok[0] == "shortcut") {
                if (!b.shortcut.empty()) throw ParseError("block already has a shortcut", line);
                KeyValues kv(tok, line);
                Layer l;
                l.line = line;
                l.name = kv.text("name", "");
                l.desc = parse_conv(kv);
                kv.finish();
                b.shortcut.push_back(std::move(l));
            } else {
                Layer l = parse_line(tok, line);
                if (l.as<BlockDesc>()) throw ParseError("nested blocks are not supported", line);
                b.body.push_back(std::move(l));
            }
            continue;
        }
        if (tok[0] == "shortcut") throw ParseError("shortcut outside a block", line);
        Layer l = parse_line(tok, line);
        if (l.as<BlockDesc>()) {
            block_projection = KeyValues(tok, line).flag("projection", false);
            block_line = line;
        }
        arch.layers.push_back(std::move(l));
        if (arch.layers.back().as<BlockDesc>()) open_block = &arch.layers.back();
    }
    close_block();
    if (!have_input) throw ParseError("missing 'input' line", line);
    if (arch.layers.empty()) throw ParseError("architecture has no layers", line);
    std::size_t next = 0;
    assign_ids(arch.layers, next);
    Walker{}.run(arch);  // shape validation
    return arch;
}

ArchSpec parse_arch_string(const std::string& text) {
    std::istringstream is(text);
    return parse_arch(is);
}

ArchSpec load_arch(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open arch file '" + path + "'");
    return parse_arch(f);
}

namespace {

void format_layers(const std::vector<Layer>& layers, const std::string& indent, std::ostream& os) {
    auto pad = [](Padding p) { return p == Padding::same ? "same" : "valid"; };
    for (const auto& l : layers) {
        os << indent;
        if (const auto* c = l.as<ConvDesc>()) {
            os << "conv k=" << c->kernel << " in=" << c->in << " out=" << c->out << " stride=" << c->stride
               << " pad=" << pad(c->padding) << " maskable=" << (c->maskable ? "true" : "false");
        } else if (const auto* d = l.as<DepthwiseConvDesc>()) {
            os << "dwconv k=" << d->kernel << " c=" << d->channels << " stride=" << d->stride
               << " pad=" << pad(d->padding);
        } else if (const auto* d = l.as<DenseDesc>()) {
            os << "dense in=" << d->in << " out=" << d->out;
        } else if (const auto* p = l.as<PoolDesc>()) {
            os << "pool kind=" << (p->kind == PoolKind::max ? "max" : p->kind == PoolKind::avg ? "avg" : "global");
            if (p->kind != PoolKind::global)
                os << " k=" << p->kernel << " stride=" << p->stride << " pad=" << pad(p->padding);
        } else if (const auto* b = l.as<BlockDesc>()) {
            os << "block projection=" << (b->shortcut.empty() ? "false" : "true") << " name=" << l.name << '\n';
            format_layers(b->body, indent + "  ", os);
            for (const auto& s : b->shortcut) {
                const auto& c = std::get<ConvDesc>(s.desc);
                os << indent << "  shortcut k=" << c.kernel << " in=" << c.in << " out=" << c.out
                   << " stride=" << c.stride << " pad=" << pad(c.padding)
                   << " maskable=" << (c.maskable ? "true" : "false") << " name=" << s.name << '\n';
            }
            continue;
        } else {
            os << l.kind();
        }
        os << " name=" << l.name << '\n';
    }
}

}  // namespace

std::string format_arch(const ArchSpec& arch) {
    std::ostringstream os;
    if (!arch.name.empty()) os << "name " << arch.name << '\n';
    os << "input c=" << arch.input.c << " h=" << arch.input.h << " w=" << arch.input.w << '\n';
    format_layers(arch.layers, "", os);
    return os.str();
}

ArchStats count_stats(const ArchSpec& arch, const FilterMask* mask) {
    return Walker{mask}.run(arch);
}

CompressionReport compression_report(const Totals& baseline, const Totals& pruned) {
    if (baseline.params <= 0 || baseline.flops <= 0 || pruned.params <= 0 || pruned.flops <= 0)
        throw ConfigError("compression_report requires positive parameter and FLOP counts");
    CompressionReport r;
    r.param_ratio = static_cast<double>(baseline.params) / static_cast<double>(pruned.params);
    r.flops_ratio = static_cast<double>(baseline.flops) / static_cast<double>(pruned.flops);
    r.param_percent = 100.0 * static_cast<double>(pruned.params) / static_cast<double>(baseline.params);
    r.flops_percent = 100.0 * static_cast<double>(pruned.flops) / static_cast<double>(baseline.flops);
    return r;
}

std::string human_count(std::int64_t n, int decimals) {
    char buf[64];
    const double v = static_cast<double>(n);
    if (v >= 1e9) std::snprintf(buf, sizeof buf, "%.*fB", decimals, v / 1e9);
    else if (v >= 1e6) std::snprintf(buf, sizeof buf, "%.*fM", decimals, v / 1e6);
    else if (v >= 1e3) std::snprintf(buf, sizeof buf, "%.*fK", decimals, v / 1e3);
    else std::snprintf(buf, sizeof buf, "%lld", static_cast<long long>(n));
    return buf;
}

}  // namespace cascade
