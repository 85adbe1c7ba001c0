#pragma once

#include <stdexcept>
#include <string>

namespace probdet {

// Missing, unreadable or unwritable files.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Training produced a NaN or infinite loss; term names the offending component.
struct NonFiniteLoss : std::runtime_error {
  std::string term;
  NonFiniteLoss(std::string term_name, const std::string& what) : std::runtime_error(what), term(std::move(term_name)) {}
};

}  // namespace probdet
