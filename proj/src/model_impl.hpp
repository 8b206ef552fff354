// SPDX-License-Identifier: Apache-2.0

#ifndef RAED_SRC_MODEL_IMPL_HPP
#define RAED_SRC_MODEL_IMPL_HPP

#include <memory>

#include "raed/model.hpp"

namespace raed::detail {

std::unique_ptr<Seq2SeqModel> make_transformer(const ModelConfig& config,
                                               std::uint64_t seed);
std::unique_ptr<Seq2SeqModel> make_las(const ModelConfig& config,
                                       std::uint64_t seed);

}  // namespace raed::detail

#endif  // RAED_SRC_MODEL_IMPL_HPP
