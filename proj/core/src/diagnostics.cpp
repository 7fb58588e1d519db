// Copyright 2026 The vlmim Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlmim/diagnostics.hpp"

#include <iostream>
#include <mutex>
#include <utility>

namespace vlmim {
namespace {

std::mutex& sink_mutex() {
  static std::mutex m;
  return m;
}

DiagnosticSink& sink() {
  static DiagnosticSink s = [](std::string_view msg) { std::cerr << "[vlmim] " << msg << '\n'; };
  return s;
}

}  // namespace

void emit_diagnostic(std::string_view message) {
  std::lock_guard lock(sink_mutex());
  if (sink()) sink()(message);
}

DiagnosticSink set_diagnostic_sink(DiagnosticSink s) {
  std::lock_guard lock(sink_mutex());
  return std::exchange(sink(), std::move(s));
}

}  // namespace vlmim
