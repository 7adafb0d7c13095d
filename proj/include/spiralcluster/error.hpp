#pragma once

#include <stdexcept>
#include <string>

namespace spiralcluster {

// Precondition broken by the caller (bad sizes, out-of-range parameters).
class contract_violation : public std::invalid_argument {
public:
    explicit contract_violation(const std::string& what) : std::invalid_argument(what) {}
};

// A numeric quantity left its valid domain (NaN, inf, non-finite state).
class numeric_domain_error : public std::domain_error {
public:
    explicit numeric_domain_error(const std::string& what) : std::domain_error(what) {}
};

// Reading or writing an artifact failed.
class io_error : public std::runtime_error {
public:
    explicit io_error(const std::string& what) : std::runtime_error(what) {}
};

// Artifact present but malformed. Subclassed so callers can tell the cases apart.
class load_error : public io_error {
public:
    explicit load_error(const std::string& what) : io_error(what) {}
};

class bad_magic_error : public load_error {
public:
    explicit bad_magic_error(const std::string& what) : load_error(what) {}
};

class truncated_error : public load_error {
public:
    explicit truncated_error(const std::string& what) : load_error(what) {}
};

class non_finite_error : public load_error {
public:
    explicit non_finite_error(const std::string& what) : load_error(what) {}
};

inline void require(bool cond, const std::string& what) {
    if (!cond) throw contract_violation(what);
}

}  // namespace spiralcluster
