// SPDX-License-Identifier: Apache-2.0

#ifndef RAED_TOKENS_HPP
#define RAED_TOKENS_HPP

#include <cstddef>

namespace raed {

// Reserved ids. EOS doubles as the begin-of-sequence decoder input.
inline constexpr int kPadId = 0;
inline constexpr int kEosId = 1;
inline constexpr std::size_t kReservedTokens = 2;

}  // namespace raed

#endif  // RAED_TOKENS_HPP
