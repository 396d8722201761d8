// SPDX-License-Identifier: Apache-2.0
//
// Error types shared by every module. Each family maps onto one CLI exit code
// (see cli::exit_code_for).

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace hipo {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad arguments or violated call preconditions.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Malformed or inconsistent input data: schemas, spans, checkpoints.
class DataError : public Error {
 public:
  using Error::Error;
};

class ParseError : public DataError {
 public:
  ParseError(const std::string& what, std::size_t byte_offset)
      : DataError(what + " (at byte " + std::to_string(byte_offset) + ")"),
        byte_offset_(byte_offset) {}
  std::size_t byte_offset() const { return byte_offset_; }

 private:
  std::size_t byte_offset_;
};

class SchemaError : public DataError {
 public:
  explicit SchemaError(std::string key)
      : DataError("missing or invalid field: " + key), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

class EmptySegmentError : public DataError {
 public:
  explicit EmptySegmentError(const std::string& which)
      : DataError("empty segment: " + which) {}
};

class SequenceTooLongError : public DataError {
 public:
  SequenceTooLongError(std::size_t length, std::size_t context)
      : DataError("sequence of " + std::to_string(length) +
                  " tokens exceeds context length " + std::to_string(context)) {}
};

class InvalidTokenError : public DataError {
 public:
  InvalidTokenError(long id, std::size_t vocab)
      : DataError("token id " + std::to_string(id) + " outside vocabulary of size " +
                  std::to_string(vocab)) {}
};

// Non-finite values anywhere on the loss/gradient path.
class NumericError : public Error {
 public:
  explicit NumericError(std::string primitive, const std::string& detail = "non-finite value")
      : Error(detail + " in " + primitive), primitive_(std::move(primitive)) {}
  const std::string& primitive() const { return primitive_; }

 private:
  std::string primitive_;
};

// Transport or protocol failure talking to an external LLM endpoint.
class EndpointError : public Error {
 public:
  EndpointError(const std::string& what, int status) : Error(what), status_(status) {}
  int status() const { return status_; }

 private:
  int status_;
};

}  // namespace hipo
