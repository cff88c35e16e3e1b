#pragma once

#include <stdexcept>
#include <string>

namespace xsl {

// Error taxonomy. The CLI maps each bucket to a distinct exit status:
// config errors -> 2, data/artifact errors -> 3, numeric/usage errors -> 4.
struct Error : std::runtime_error {
  Error(int exit_code, const std::string& what) : std::runtime_error(what), exit_code(exit_code) {}
  int exit_code;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error(2, what) {}
};

struct DataError : Error {
  explicit DataError(const std::string& what) : Error(3, what) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& what) : Error(4, what) {}
};

// -- config bucket
struct BadConfig : ConfigError { using ConfigError::ConfigError; };
struct ConfigMismatch : ConfigError { using ConfigError::ConfigError; };
struct UnknownLayer : ConfigError { using ConfigError::ConfigError; };

// -- data bucket
struct InsufficientPool : DataError { using DataError::DataError; };
struct InsufficientData : DataError { using DataError::DataError; };
struct MissingCheckpoint : DataError { using DataError::DataError; };
struct MissingArtifact : DataError { using DataError::DataError; };
struct FormatError : DataError { using DataError::DataError; };

// -- numeric/usage bucket
struct InvalidInput : NumericError { using NumericError::NumericError; };
struct EmptyInput : NumericError { using NumericError::NumericError; };
struct DimMismatch : NumericError { using NumericError::NumericError; };
struct UtteranceTooShort : NumericError { using NumericError::NumericError; };
struct NonFiniteGradient : NumericError { using NumericError::NumericError; };
struct UnbalancedTypes : NumericError { using NumericError::NumericError; };
struct CategoryMismatch : NumericError { using NumericError::NumericError; };
struct BadK : NumericError { using NumericError::NumericError; };
struct LengthMismatch : NumericError { using NumericError::NumericError; };
struct DegenerateInput : NumericError { using NumericError::NumericError; };

}  // namespace xsl
