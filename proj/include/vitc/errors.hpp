#pragma once

#include <stdexcept>
#include <string>

namespace vitc {

// Shape mismatch between operands of a tensor op.
class DimensionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Parameter passed to grad_of that is not reachable from the loss.
class UnknownParameterError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Invalid architecture or run configuration.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Merge plan that is illegal for a grid, or a target the planner cannot reach.
class PlacementError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Violation of head-level or attention-level shape consistency.
class ConsistencyError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A compactor or head would lose its last retained channel.
class MinimumRetentionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Channel selection could not reach the requested reduction ratio.
class SelectionError : public std::runtime_error {
public:
    SelectionError(const std::string& what, double max_achievable)
        : std::runtime_error(what), max_achievable_(max_achievable) {}
    double max_achievable() const noexcept { return max_achievable_; }

private:
    double max_achievable_;
};

// Malformed or inconsistent dataset manifest.
class IngestionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed checkpoint file.
class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Training diverged or was fed inconsistent data.
class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace vitc
