#pragma once

#include <string>
#include <vector>

#include "pitpo/expr.hpp"

namespace pitpo {

// Shape of the program space the built-in policy samples from.
struct GrammarSpec {
    std::vector<std::string> variables;
    std::vector<expr::Func> functions{expr::Func::Exp, expr::Func::Log, expr::Func::Sin, expr::Func::Cos,
                                      expr::Func::Tanh, expr::Func::Sqrt, expr::Func::Abs};
    std::vector<int> exponents{2, 3, -1};
    // Macro factors. When non-empty they replace variables, powers and
    // function calls as the factor alphabet (dictionary tasks).
    std::vector<std::string> atoms;
    bool shape_parameters{true};  // c*var inside function arguments
    bool constant_term{true};
    bool implicit_unit{true};     // terms without a leading coefficient
    bool minus{true};             // allow '-' between terms
    int max_terms{5};
    int max_factors{3};
    int max_depth{2};
    int outputs{1};
};

}  // namespace pitpo
