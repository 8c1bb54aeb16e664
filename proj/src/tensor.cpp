#include "schvpp/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "schvpp/error.hpp"

namespace schvpp {

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(values.begin(), values.end()) {
    if (data.size() != shape_numel(shape))
        throw InvalidArgument("tensor: " + std::to_string(data.size()) + " values for shape " + shape_str(shape));
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape s) const {
    if (shape_numel(s) != numel()) throw InvalidArgument("reshape: " + shape_str(shape) + " -> " + shape_str(s));
    Tensor out;
    out.shape = std::move(s);
    out.data = data;
    return out;
}

template <typename T>
bool Tensor<T>::all_finite() const {
    for (T v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

void require_same_shape(const Shape& a, const Shape& b, const char* what) {
    if (a != b) throw InvalidArgument(std::string(what) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

template struct Tensor<float>;
template struct Tensor<double>;

} // namespace schvpp
