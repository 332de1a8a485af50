#include "mpic/tensor.h"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace mpic {

void KvTensor::resize_tokens(uint32_t new_tokens) {
    if (new_tokens == n_tokens) {
        return;
    }
    const size_t rs = row_size();
    const size_t old_ls = layer_size();
    const size_t new_ls = static_cast<size_t>(new_tokens) * rs;
    std::vector<float> nk(static_cast<size_t>(n_layers) * new_ls, 0.0f);
    std::vector<float> nv(nk.size(), 0.0f);
    const size_t copy = std::min(old_ls, new_ls);
    for (uint32_t l = 0; l < n_layers; ++l) {
        std::memcpy(nk.data() + l * new_ls, k.data() + l * old_ls, copy * sizeof(float));
        std::memcpy(nv.data() + l * new_ls, v.data() + l * old_ls, copy * sizeof(float));
    }
    k = std::move(nk);
    v = std::move(nv);
    n_tokens = new_tokens;
}

bool KvTensor::all_finite() const {
    auto ok = [](const std::vector<float>& a) {
        return std::all_of(a.begin(), a.end(), [](float x) { return std::isfinite(x); });
    };
    return ok(k) && ok(v);
}

} // namespace mpic
