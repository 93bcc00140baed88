#include "vinter/nn.hpp"

namespace vinter {

Mask causal_mask(std::size_t t) {
    if (t == 0) throw ContractError("causal_mask: sequence length must be >= 1");
    Mask m(t, t, false);
    for (std::size_t i = 0; i < t; ++i) {
        for (std::size_t j = 0; j <= i; ++j) m.set(i, j, true);
    }
    return m;
}

Mask padding_mask(const std::vector<std::uint8_t>& key_allowed) {
    const std::size_t n = key_allowed.size();
    Mask m(n, n, false);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) m.set(i, j, key_allowed[j] != 0);
    }
    return m;
}

Mask cross_mask(std::size_t query_len, const std::vector<std::uint8_t>& key_allowed) {
    Mask m(query_len, key_allowed.size(), false);
    for (std::size_t i = 0; i < query_len; ++i) {
        for (std::size_t j = 0; j < key_allowed.size(); ++j) m.set(i, j, key_allowed[j] != 0);
    }
    return m;
}

}  // namespace vinter
