#include "refold/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

namespace refold {

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

double parse_double(const std::string& tok, const std::string& context) {
    char* end = nullptr;
    double v = std::strtod(tok.c_str(), &end);
    if (end == tok.c_str() || *end != '\0')
        throw ParseError(context + ": non-numeric value '" + tok + "'");
    if (!std::isfinite(v))
        throw ParseError(context + ": non-finite value '" + tok + "'");
    return v;
}

std::vector<std::string> split_ws(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream iss(line);
    std::string tok;
    while (iss >> tok) out.push_back(tok);
    return out;
}

std::vector<std::string> split_char(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

}  // namespace

std::vector<Sequence> parse_fasta(const std::string& text) {
    std::vector<Sequence> seqs;
    std::istringstream iss(text);
    std::string line;
    bool in_record = false;
    Sequence cur;
    auto flush = [&]() {
        if (in_record) {
            if (cur.tokens.empty())
                throw ParseError("fasta: record '" + cur.id + "' is empty");
            seqs.push_back(std::move(cur));
            cur = Sequence{};
        }
    };
    while (std::getline(iss, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line[0] == '>') {
            flush();
            in_record = true;
            std::string header = line.substr(1);
            cur.id = split_ws(header).empty() ? header : split_ws(header)[0];
        } else {
            if (!in_record)
                throw ParseError("fasta: sequence data before first header");
            for (char c : line) {
                if (c == ' ' || c == '\t') continue;
                auto t = char_to_token(c);
                if (!t || !is_canonical(*t))
                    throw ParseError("fasta: record '" + cur.id + "': unknown residue '" +
                                     std::string(1, c) + "' at position " +
                                     std::to_string(cur.tokens.size() + 1));
                cur.tokens.push_back(*t);
            }
        }
    }
    flush();
    return seqs;
}

std::string format_fasta(const std::vector<Sequence>& seqs) {
    std::string out;
    for (const auto& s : seqs) {
        out += ">" + s.id + "\n" + s.str() + "\n";
    }
    return out;
}

Backbone parse_backbone(const std::string& text) {
    std::istringstream iss(text);
    std::string line;
    if (!std::getline(iss, line)) throw ParseError("backbone: empty input");
    auto head = split_ws(line);
    if (head.size() != 2) throw ParseError("backbone: header must be 'id L'");
    Backbone b;
    b.id = head[0];
    int L = 0;
    try {
        L = std::stoi(head[1]);
    } catch (...) {
        throw ParseError("backbone: bad length '" + head[1] + "'");
    }
    if (L < 1) throw ParseError("backbone: length must be >= 1");
    for (int i = 0; i < L; ++i) {
        if (!std::getline(iss, line))
            throw ParseError("backbone: expected " + std::to_string(L) + " residues, got " +
                             std::to_string(i));
        auto toks = split_ws(line);
        if (toks.size() != 9)
            throw ParseError("backbone: residue " + std::to_string(i + 1) +
                             ": expected 9 coordinates, got " + std::to_string(toks.size()));
        const std::string ctx = "backbone residue " + std::to_string(i + 1);
        BackboneResidue r;
        double v[9];
        for (int k = 0; k < 9; ++k) v[k] = parse_double(toks[static_cast<size_t>(k)], ctx);
        r.n = Vec3(v[0], v[1], v[2]);
        r.ca = Vec3(v[3], v[4], v[5]);
        r.c = Vec3(v[6], v[7], v[8]);
        b.residues.push_back(r);
    }
    for (int i = 1; i < b.length(); ++i) {
        if ((b.ca(i) - b.ca(i - 1)).norm() >= 6.0)
            std::cerr << "warning: backbone '" << b.id << "': CA-CA distance >= 6.0 A between residues "
                      << i << " and " << i + 1 << "\n";
    }
    return b;
}

std::string format_backbone(const Backbone& b) {
    std::string out = b.id + " " + std::to_string(b.length()) + "\n";
    for (const auto& r : b.residues) {
        const Vec3* atoms[3] = {&r.n, &r.ca, &r.c};
        std::string line;
        for (const Vec3* a : atoms)
            for (int k = 0; k < 3; ++k) {
                if (!line.empty()) line += " ";
                line += fmt_double((*a)(k));
            }
        out += line + "\n";
    }
    return out;
}

Backbone parse_pdb_backbone(const std::string& text, const std::string& id) {
    std::istringstream iss(text);
    std::string line;
    Backbone b;
    b.id = id;
    int cur_resseq = 0;
    bool have_res = false;
    bool got_n = false, got_ca = false, got_c = false;
    BackboneResidue cur{};
    int res_count = 0;
    auto flush_residue = [&]() {
        if (!have_res) return;
        ++res_count;
        if (!got_n || !got_ca || !got_c)
            throw ParseError("pdb: residue " + std::to_string(res_count) + " (resSeq " +
                             std::to_string(cur_resseq) + ") missing " +
                             (!got_ca ? "CA" : (!got_n ? "N" : "C")) + " atom");
        b.residues.push_back(cur);
        got_n = got_ca = got_c = false;
        cur = BackboneResidue{};
    };
    while (std::getline(iss, line)) {
        if (line.rfind("ATOM", 0) != 0) continue;
        if (line.size() < 54) throw ParseError("pdb: truncated ATOM record");
        std::string name = line.substr(12, 4);
        name.erase(0, name.find_first_not_of(' '));
        name.erase(name.find_last_not_of(' ') + 1);
        int resseq = std::stoi(line.substr(22, 4));
        if (have_res && resseq != cur_resseq) {
            if (resseq < cur_resseq)
                throw ParseError("pdb: non-monotonic residue numbering at resSeq " +
                                 std::to_string(resseq));
            flush_residue();
            cur_resseq = resseq;
        } else if (!have_res) {
            cur_resseq = resseq;
            have_res = true;
        }
        const std::string ctx = "pdb resSeq " + std::to_string(resseq);
        Vec3 xyz(parse_double(line.substr(30, 8), ctx), parse_double(line.substr(38, 8), ctx),
                 parse_double(line.substr(46, 8), ctx));
        if (name == "N") {
            cur.n = xyz;
            got_n = true;
        } else if (name == "CA") {
            cur.ca = xyz;
            got_ca = true;
        } else if (name == "C") {
            cur.c = xyz;
            got_c = true;
        }
    }
    flush_residue();
    if (b.residues.empty()) throw ParseError("pdb: no backbone residues found");
    return b;
}

Backbone parse_backbone_auto(const std::string& text, const std::string& fallback_id) {
    if (text.rfind("ATOM", 0) == 0 || text.find("\nATOM") != std::string::npos)
        return parse_pdb_backbone(text, fallback_id);
    return parse_backbone(text);
}

LogitMatrix parse_logits(const std::string& text) {
    std::istringstream iss(text);
    std::string line;
    if (!std::getline(iss, line)) throw ParseError("logits: empty input");
    auto head = split_ws(line);
    if (head.size() != 2 || head[1] != "20")
        throw ParseError("logits: header must be 'L 20'");
    int L = 0;
    try {
        L = std::stoi(head[0]);
    } catch (...) {
        throw ParseError("logits: bad row count '" + head[0] + "'");
    }
    if (L < 1) throw ParseError("logits: row count must be >= 1");
    LogitMatrix m(L, kNumResidues);
    for (int i = 0; i < L; ++i) {
        if (!std::getline(iss, line))
            throw ParseError("logits: declared " + std::to_string(L) + " rows, found " +
                             std::to_string(i));
        auto toks = split_ws(line);
        if (toks.size() != kNumResidues)
            throw ParseError("logits: row " + std::to_string(i + 1) +
                             ": expected 20 residue columns, got " + std::to_string(toks.size()));
        for (int j = 0; j < kNumResidues; ++j)
            m(i, j) = parse_double(toks[static_cast<size_t>(j)],
                                   "logits row " + std::to_string(i + 1));
    }
    return m;
}

std::string format_logits(const LogitMatrix& m) {
    std::string out = std::to_string(m.rows()) + " 20\n";
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        std::string line;
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            if (j) line += " ";
            line += fmt_double(m(i, j));
        }
        out += line + "\n";
    }
    return out;
}

std::map<std::string, std::vector<NeighborHit>> parse_hits(const std::string& text) {
    std::map<std::string, std::vector<NeighborHit>> out;
    std::istringstream iss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(iss, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        auto cols = split_char(line, '\t');
        if (cols.size() != 4)
            throw ParseError("hits line " + std::to_string(lineno) + ": expected 4 tab-separated columns");
        NeighborHit hit;
        hit.target_id = cols[1];
        hit.tm_score = parse_double(cols[2], "hits line " + std::to_string(lineno));
        if (!(hit.tm_score > 0.0 && hit.tm_score <= 1.0))
            throw ParseError("hits line " + std::to_string(lineno) + ": tm_score " + cols[2] +
                             " outside (0,1]");
        int prev_q = -1, prev_t = -1;
        for (const auto& pair_tok : split_char(cols[3], ',')) {
            auto qt = split_char(pair_tok, ':');
            if (qt.size() != 2)
                throw ParseError("hits line " + std::to_string(lineno) + ": bad pair '" + pair_tok + "'");
            int q = 0, t = 0;
            try {
                q = std::stoi(qt[0]);
                t = std::stoi(qt[1]);
            } catch (...) {
                throw ParseError("hits line " + std::to_string(lineno) + ": bad pair '" + pair_tok + "'");
            }
            if (q < 0 || t < 0)
                throw ParseError("hits line " + std::to_string(lineno) + ": negative index in pair");
            if (q <= prev_q || t <= prev_t)
                throw ParseError("hits line " + std::to_string(lineno) +
                                 ": pair indices not strictly increasing at '" + pair_tok + "'");
            prev_q = q;
            prev_t = t;
            hit.pairs.emplace_back(q, t);
        }
        out[cols[0]].push_back(std::move(hit));
    }
    for (auto& [qid, hits] : out)
        std::stable_sort(hits.begin(), hits.end(),
                         [](const NeighborHit& a, const NeighborHit& b) { return a.tm_score > b.tm_score; });
    return out;
}

std::string format_hits(const std::string& query_id, const std::vector<NeighborHit>& hits) {
    std::string out;
    for (const auto& h : hits) {
        std::string pairs;
        for (const auto& [q, t] : h.pairs) {
            if (!pairs.empty()) pairs += ",";
            pairs += std::to_string(q) + ":" + std::to_string(t);
        }
        out += query_id + "\t" + h.target_id + "\t" + fmt_double(h.tm_score) + "\t" + pairs + "\n";
    }
    return out;
}

void Checkpoint::add(const std::string& name, const std::vector<int>& shape,
                     const std::vector<double>& data) {
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    if (n != data.size())
        throw ParseError("checkpoint array '" + name + "': shape/data size mismatch");
    arrays.push_back({name, shape, data});
}

const Checkpoint::Array& Checkpoint::get(const std::string& name) const {
    for (const auto& a : arrays)
        if (a.name == name) return a;
    throw ParseError("checkpoint: missing array '" + name + "'");
}

bool Checkpoint::has(const std::string& name) const {
    for (const auto& a : arrays)
        if (a.name == name) return true;
    return false;
}

Checkpoint parse_checkpoint(const std::string& text) {
    std::istringstream iss(text);
    std::string line;
    if (!std::getline(iss, line) || line != "REFOLD-CKPT v1")
        throw ParseError("checkpoint: bad magic (expected 'REFOLD-CKPT v1')");
    Checkpoint ckpt;
    while (std::getline(iss, line)) {
        if (line.empty()) continue;
        auto head = split_ws(line);
        if (head.size() < 2) throw ParseError("checkpoint: bad array header '" + line + "'");
        std::string name = head[0];
        int ndims = std::stoi(head[1]);
        if (static_cast<int>(head.size()) != 2 + ndims)
            throw ParseError("checkpoint array '" + name + "': dimension count mismatch");
        std::vector<int> shape;
        size_t n = 1;
        for (int k = 0; k < ndims; ++k) {
            int d = std::stoi(head[static_cast<size_t>(2 + k)]);
            if (d < 0) throw ParseError("checkpoint array '" + name + "': negative dimension");
            shape.push_back(d);
            n *= static_cast<size_t>(d);
        }
        if (!std::getline(iss, line))
            throw ParseError("checkpoint array '" + name + "': missing data line");
        auto toks = split_ws(line);
        if (toks.size() != n)
            throw ParseError("checkpoint array '" + name + "': expected " + std::to_string(n) +
                             " values, got " + std::to_string(toks.size()));
        std::vector<double> data(n);
        for (size_t k = 0; k < n; ++k)
            data[k] = parse_double(toks[k], "checkpoint array '" + name + "'");
        ckpt.arrays.push_back({std::move(name), std::move(shape), std::move(data)});
    }
    return ckpt;
}

std::string format_checkpoint(const Checkpoint& ckpt) {
    std::string out = "REFOLD-CKPT v1\n";
    for (const auto& a : ckpt.arrays) {
        out += a.name + " " + std::to_string(a.shape.size());
        for (int d : a.shape) out += " " + std::to_string(d);
        out += "\n";
        std::string line;
        for (double v : a.data) {
            if (!line.empty()) line += " ";
            line += fmt_double(v);
        }
        out += line + "\n";
    }
    return out;
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ParseError("cannot open file: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ParseError("cannot write file: " + path);
    f << content;
}

LogitMatrix read_logits(const std::string& path) { return parse_logits(read_file(path)); }

void write_logits(const LogitMatrix& m, const std::string& path) {
    write_file(path, format_logits(m));
}

}  // namespace refold
