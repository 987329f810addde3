#pragma once

#include <stdexcept>
#include <string>

namespace pose6d {

struct invalid_rotation_error : std::runtime_error {
  explicit invalid_rotation_error(const std::string& what) : std::runtime_error(what) {}
};

struct behind_camera_error : std::runtime_error {
  explicit behind_camera_error(const std::string& what) : std::runtime_error(what) {}
};

struct invalid_depth_error : std::runtime_error {
  explicit invalid_depth_error(const std::string& what) : std::runtime_error(what) {}
};

struct out_of_view_error : std::runtime_error {
  explicit out_of_view_error(const std::string& what) : std::runtime_error(what) {}
};

struct config_error : std::runtime_error {
  explicit config_error(const std::string& what) : std::runtime_error(what) {}
};

struct state_error : std::runtime_error {
  explicit state_error(const std::string& what) : std::runtime_error(what) {}
};

struct data_error : std::runtime_error {
  explicit data_error(const std::string& what) : std::runtime_error(what) {}
};

struct divergence_error : std::runtime_error {
  explicit divergence_error(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace pose6d
