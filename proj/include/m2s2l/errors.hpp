// Copyright 2026 The m2s2l Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace m2s2l {

// Violated shape or precondition contract of an operation.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Invalid or inconsistent configuration (bad key, non-divisible patch size...).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Parameter value outside its mathematical domain (non-finite step, ...).
class ParameterDomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Operation not permitted in the current train/inference mode.
class ModeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ROC AUC requested for labels that contain a single class.
class UndefinedAucError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss term.
class NonFiniteLossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ContractError(what);
}

}  // namespace m2s2l
