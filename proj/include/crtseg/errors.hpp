#pragma once

#include <stdexcept>
#include <string>

namespace crtseg {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Contract violation on inputs (shapes, ranges, non-finite values).
class ValidationError : public Error {
public:
    using Error::Error;
};

// A file could not be read or parsed.
class LoadError : public Error {
public:
    using Error::Error;
};

// No superpixel satisfies the pseudo-label area constraints.
class NoEligibleSegment : public Error {
public:
    using Error::Error;
};

// A class has no pixels at feature resolution, so no prototype can be pooled.
class EmptyClassMask : public Error {
public:
    explicit EmptyClassMask(int class_id)
        : Error("class " + std::to_string(class_id) + " has an empty mask at feature resolution"),
          class_id_(class_id) {}
    int class_id() const noexcept { return class_id_; }

private:
    int class_id_;
};

// Training diverged; carries enough to replay the failing episode.
class NumericalError : public Error {
public:
    NumericalError(const std::string& what, long iteration, unsigned long long episode_seed)
        : Error(what), iteration_(iteration), episode_seed_(episode_seed) {}
    long iteration() const noexcept { return iteration_; }
    unsigned long long episode_seed() const noexcept { return episode_seed_; }

private:
    long iteration_;
    unsigned long long episode_seed_;
};

}  // namespace crtseg
