#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>

namespace seibw {

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/stride/width mismatches.
struct DimError : Error {
  using Error::Error;
};

// Malformed files (IDX, CIFAR batches, SEIB containers, checkpoints).
struct FormatError : Error {
  using Error::Error;
};

// Operation requires recorded forward state that is not present.
struct StateError : Error {
  using Error::Error;
};

// Invalid values: bad config fields, labels out of range, teacher rows
// that are not distributions, batch statistics on degenerate batches.
struct ValueError : Error {
  using Error::Error;
};

// Operation applied to a layer in the wrong weight mode.
struct ModeError : Error {
  using Error::Error;
};

namespace detail {
template <class E>
[[noreturn]] void throw_error(const char* file, int line, const std::string& msg) {
  std::ostringstream os;
  os << msg << " (" << file << ":" << line << ")";
  throw E(os.str());
}
}  // namespace detail

#define SEIBW_CHECK(cond, msg)                                                   \
  do {                                                                           \
    if (!(cond)) ::seibw::detail::throw_error<::seibw::Error>(__FILE__, __LINE__, (msg)); \
  } while (0)

#define SEIBW_CHECK_DIM(cond, msg)                                               \
  do {                                                                           \
    if (!(cond)) ::seibw::detail::throw_error<::seibw::DimError>(__FILE__, __LINE__, (msg)); \
  } while (0)

#define SEIBW_CHECK_VALUE(cond, msg)                                             \
  do {                                                                           \
    if (!(cond)) ::seibw::detail::throw_error<::seibw::ValueError>(__FILE__, __LINE__, (msg)); \
  } while (0)

#define SEIBW_CHECK_FORMAT(cond, msg)                                            \
  do {                                                                           \
    if (!(cond)) ::seibw::detail::throw_error<::seibw::FormatError>(__FILE__, __LINE__, (msg)); \
  } while (0)

// Worker count for parallel_for. 0 = hardware concurrency.
void set_num_threads(int n);
int num_threads();

// Runs fn(i) for i in [0, n). Work is split into contiguous chunks; every
// index is written by exactly one task, so results do not depend on the
// worker count. fn must only write to disjoint outputs per index.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& chunk_fn);

}  // namespace seibw
