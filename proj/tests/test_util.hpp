#pragma once

#include <cstdlib>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "blsp/tensor.hpp"

namespace testutil {

inline std::string fixture_dir() {
    const char* d = std::getenv("BLSP_FIXTURE_DIR");
    if (d && *d) return d;
    auto p = std::filesystem::temp_directory_path() / "blsp_fixtures";
    std::filesystem::create_directories(p);
    return p.string();
}

inline std::string cli_path() {
    const char* p = std::getenv("BLSP_CLI");
    return p ? p : "";
}

// fresh scratch dir under the build tree
inline std::string scratch_dir(const std::string& tag) {
    auto p = std::filesystem::temp_directory_path() / ("blsp_test_" + tag);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p.string();
}

// Central finite differences against backprop. `build` must construct the
// graph from the given leaves and return the scalar root. Checks up to
// `max_coords` coordinates of each leaf (deterministic stride sampling).
struct GradCheckResult {
    double max_rel_err = 0.0;
    int checked = 0;
};

inline GradCheckResult grad_check(std::vector<blsp::ag::NodePtr> leaves,
                                  const std::function<blsp::ag::NodePtr()>& build,
                                  double h = 5e-3, int max_coords = 24) {
    using namespace blsp;
    GradCheckResult res;
    auto root = build();
    ag::backward(root);
    std::vector<std::vector<float>> analytic;
    for (auto& l : leaves) {
        l->ensure_grad();
        analytic.push_back(l->grad);
    }
    for (size_t li = 0; li < leaves.size(); ++li) {
        auto& l = leaves[li];
        size_t n = l->val.v.size();
        size_t stride = std::max<size_t>(1, n / size_t(max_coords));
        for (size_t i = 0; i < n; i += stride) {
            float orig = l->val.v[i];
            double step = h * std::max(1.0, std::abs(double(orig)));
            l->val.v[i] = float(orig + step);
            double fp = double(build()->val.v[0]);
            l->val.v[i] = float(orig - step);
            double fm = double(build()->val.v[0]);
            l->val.v[i] = orig;
            double fd = (fp - fm) / (2.0 * step);
            double bp = double(analytic[li][i]);
            double rel = std::abs(fd - bp) / std::max({std::abs(fd), std::abs(bp), 1e-3});
            res.max_rel_err = std::max(res.max_rel_err, rel);
            ++res.checked;
        }
        l->zero_grad();
    }
    return res;
}

}  // namespace testutil
