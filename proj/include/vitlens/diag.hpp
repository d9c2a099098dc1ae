#pragma once

#include <functional>
#include <string>

namespace vitlens {

// Non-fatal diagnostics (re-normalized vocabularies, word-list misses, ...).
// The default sink writes to stderr; tests and the service swap it out.
using WarningSink = std::function<void(const std::string&)>;

void set_warning_sink(WarningSink sink);
void warn(const std::string& message);

} // namespace vitlens
