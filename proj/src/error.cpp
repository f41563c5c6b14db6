#include "sfiqa/error.hpp"

namespace sfiqa {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidArgument: return "invalid argument";
    case ErrorKind::kDomain: return "domain error";
    case ErrorKind::kShape: return "shape error";
    case ErrorKind::kMissingDomain: return "missing domain";
    case ErrorKind::kAlreadyExists: return "already exists";
    case ErrorKind::kUninitializedStatistics: return "uninitialized statistics";
    case ErrorKind::kTraceMismatch: return "trace mismatch";
    case ErrorKind::kState: return "optimizer state error";
    case ErrorKind::kConfig: return "config error";
    case ErrorKind::kData: return "data error";
    case ErrorKind::kSplit: return "split error";
    case ErrorKind::kCrop: return "crop error";
    case ErrorKind::kFit: return "fit error";
    case ErrorKind::kMetric: return "metric error";
    case ErrorKind::kIo: return "io error";
  }
  return "error";
}

}  // namespace sfiqa
