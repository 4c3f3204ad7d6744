// On-disk formats: FASTA, backbone tables (plus a minimal PDB reader),
// logits files, neighbor-hit TSV, and the versioned checkpoint container.
#pragma once

#include <map>
#include <string>
#include <vector>

#include "refold/types.hpp"

namespace refold {

std::vector<Sequence> parse_fasta(const std::string& text);
std::string format_fasta(const std::vector<Sequence>& seqs);

// Native format: first line "id L", then L lines "nx ny nz cax cay caz cx cy cz".
Backbone parse_backbone(const std::string& text);
std::string format_backbone(const Backbone& b);

// Minimal PDB subset: ATOM records for N/CA/C of a single chain.
Backbone parse_pdb_backbone(const std::string& text, const std::string& id);

// Dispatches on content: PDB if the text contains ATOM records.
Backbone parse_backbone_auto(const std::string& text, const std::string& fallback_id);

// Logits file: first line "L 20", then L rows of 20 reals.
LogitMatrix parse_logits(const std::string& text);
std::string format_logits(const LogitMatrix& m);

// Hits TSV: query_id \t target_id \t tm_score \t q0:t0,q1:t1,...
// Rows grouped per query, sorted descending by tm_score within a query.
std::map<std::string, std::vector<NeighborHit>> parse_hits(const std::string& text);
std::string format_hits(const std::string& query_id, const std::vector<NeighborHit>& hits);

// Versioned text container of named row-major arrays.
struct Checkpoint {
    struct Array {
        std::string name;
        std::vector<int> shape;
        std::vector<double> data;
    };
    std::vector<Array> arrays;

    void add(const std::string& name, const std::vector<int>& shape,
             const std::vector<double>& data);
    const Array& get(const std::string& name) const;
    bool has(const std::string& name) const;
};

Checkpoint parse_checkpoint(const std::string& text);
std::string format_checkpoint(const Checkpoint& ckpt);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& content);

LogitMatrix read_logits(const std::string& path);
void write_logits(const LogitMatrix& m, const std::string& path);

}  // namespace refold
