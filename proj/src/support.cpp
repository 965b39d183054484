#include "ppg/support.hpp"

#include <sstream>

#include "ppg/errors.hpp"

namespace ppg {

void require_binary_mask(const Tensor& mask, const char* what) {
  const auto d = mask.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d[i] != 0.0 && d[i] != 1.0) {
      std::ostringstream os;
      os << what << ": mask value " << d[i] << " at flat index " << i << " is not binary";
      throw UsageError(os.str());
    }
  }
}

void SupportSet::validate(std::size_t patch) const {
  if (!images.defined() || !masks.defined()) throw UsageError("support set is empty");
  if (images.rank() != 4 || images.dim(1) != 3)
    throw ShapeError("support images must be [K,3,H0,W0], got " + shape_str(images.shape()));
  if (masks.rank() != 4 || masks.dim(1) != images.dim(0) || masks.dim(2) != images.dim(2) ||
      masks.dim(3) != images.dim(3))
    throw ShapeError("support masks " + shape_str(masks.shape()) + " do not match images " +
                     shape_str(images.shape()));
  if (height() % patch != 0 || width() % patch != 0)
    throw ShapeError("support size " + std::to_string(height()) + "x" + std::to_string(width()) +
                     " is not divisible by " + std::to_string(patch));
  require_binary_mask(masks, "support set");
}

}  // namespace ppg
