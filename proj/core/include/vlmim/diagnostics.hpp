// Copyright 2026 The vlmim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <string>
#include <string_view>

namespace vlmim {

using DiagnosticSink = std::function<void(std::string_view)>;

// Non-fatal notices (sampling fallbacks, skipped losses). Default sink writes
// to stderr; tests swap in a capturing sink.
void emit_diagnostic(std::string_view message);
DiagnosticSink set_diagnostic_sink(DiagnosticSink sink);

}  // namespace vlmim
