#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace act {

/// Raised when a caller breaks an operation's precondition (shape, range, scope).
class ContractViolation : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Raised when a numeric argument falls outside an operation's domain.
class DomainError : public std::domain_error {
public:
    DomainError(const std::string& what, std::size_t index)
        : std::domain_error(what), index_(index) {}
    std::size_t index() const noexcept { return index_; }

private:
    std::size_t index_;
};

/// Malformed checkpoint, dataset or config text. Carries a 1-based line number (0 if unknown).
class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& source, std::size_t line, const std::string& what)
        : std::runtime_error(source + (line ? ":" + std::to_string(line) : std::string{}) + ": " + what),
          line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// A training loss went non-finite.
class DivergenceError : public std::runtime_error {
public:
    DivergenceError(const std::string& what, std::size_t iteration)
        : std::runtime_error(what), iteration_(iteration) {}
    std::size_t iteration() const noexcept { return iteration_; }

private:
    std::size_t iteration_;
};

namespace detail {
inline void require(bool ok, const std::string& what) {
    if (!ok) throw ContractViolation(what);
}
}  // namespace detail

}  // namespace act
