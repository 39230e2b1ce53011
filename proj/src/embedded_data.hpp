#pragma once

#include <string_view>

// Contents of the data/ files, compiled in so binaries are relocatable.
namespace rulelab::embedded {

std::string_view refusal_patterns();
std::string_view refusal_templates();

}  // namespace rulelab::embedded
