#include "sit/nn.hpp"

namespace sit::nn {

template Matrix<float> linear_forward<float>(const Matrix<float>&, const LinearParams<float>&);
template Matrix<double> linear_forward<double>(const Matrix<double>&, const LinearParams<double>&);
template LinearGrads<float> linear_backward<float>(const Matrix<float>&, const LinearParams<float>&,
                                                   const Matrix<float>&, bool);
template LinearGrads<double> linear_backward<double>(const Matrix<double>&, const LinearParams<double>&,
                                                     const Matrix<double>&, bool);
template Matrix<float> layernorm_forward<float>(const Matrix<float>&, const LayerNormParams<float>&, float,
                                                LayerNormCache<float>*);
template Matrix<double> layernorm_forward<double>(const Matrix<double>&, const LayerNormParams<double>&, double,
                                                  LayerNormCache<double>*);

}  // namespace sit::nn
