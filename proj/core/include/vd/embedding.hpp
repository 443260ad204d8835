#pragma once

#include "vd/tensor.hpp"
#include "vd/types.hpp"

namespace vd {

// K x D token matrix conditioning one flow. Token 0 is the pooled global
// vector; tokens 1..K-1 are local (patch / attribute block) vectors.
template <typename T>
struct ContextEmbedding {
    Tensor<T> tokens;  // [K, D]
    Modality modality = Modality::Text;

    int64_t token_count() const { return tokens.shape.empty() ? 0 : tokens.shape[0]; }
    int64_t dim() const { return tokens.rank() == 2 ? tokens.shape[1] : 0; }

    static ContextEmbedding zero(int64_t k, int64_t d, Modality m) {
        ContextEmbedding e;
        e.tokens = Tensor<T>({k, d});
        e.modality = m;
        return e;
    }
};

// Keep/drop flags over the K-1 local patches, true = keep.
struct MaskSpec {
    std::vector<bool> keep;

    size_t size() const { return keep.size(); }
    static MaskSpec all_true(size_t n) {
        MaskSpec m;
        m.keep.assign(n, true);
        return m;
    }
    static MaskSpec all_false(size_t n) {
        MaskSpec m;
        m.keep.assign(n, false);
        return m;
    }
};

}  // namespace vd
