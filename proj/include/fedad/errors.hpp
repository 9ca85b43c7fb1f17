/*
 * Copyright 2026 The FedAD Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *      http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#include <stdexcept>
#include <string>

namespace fedad {

// Exit-code-bearing error families. Plain precondition violations inside the
// numeric operations throw std::invalid_argument instead.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MissingArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised by the pipeline orchestrator; `stage()` names the stage that failed.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what)
      : std::runtime_error("[" + stage + "] " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

}  // namespace fedad
