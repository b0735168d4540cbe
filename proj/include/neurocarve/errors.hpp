#pragma once

#include <stdexcept>
#include <string>

// All failure modes surface as typed exceptions so callers and tests can
// distinguish them. Each condition gets its own type; no error codes.

namespace ncarve {

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

#define NCARVE_DEFINE_ERROR(Name)                                      \
    struct Name : Error {                                              \
        explicit Name(const std::string& msg = #Name) : Error(msg) {}  \
    }

// container / image formats
NCARVE_DEFINE_ERROR(BadMagic);
NCARVE_DEFINE_ERROR(DimMismatch);
NCARVE_DEFINE_ERROR(TruncatedPayload);
NCARVE_DEFINE_ERROR(NonFiniteValue);
NCARVE_DEFINE_ERROR(UnsupportedFormat);

// fmri data handling
NCARVE_DEFINE_ERROR(TooFewFrames);
NCARVE_DEFINE_ERROR(CountTooLarge);
NCARVE_DEFINE_ERROR(UnknownRoiId);
NCARVE_DEFINE_ERROR(InsufficientObjects);

// geometry
NCARVE_DEFINE_ERROR(IndexOutOfRange);
NCARVE_DEFINE_ERROR(MalformedLine);
NCARVE_DEFINE_ERROR(EmptyMesh);
NCARVE_DEFINE_ERROR(DegenerateExtent);
NCARVE_DEFINE_ERROR(NoArea);
NCARVE_DEFINE_ERROR(DegenerateCamera);

// metrics
NCARVE_DEFINE_ERROR(EmptyCloud);
NCARVE_DEFINE_ERROR(SizeMismatch);
NCARVE_DEFINE_ERROR(TooLargeForExact);
NCARVE_DEFINE_ERROR(NonConvergence);
NCARVE_DEFINE_ERROR(NotSymmetric);
NCARVE_DEFINE_ERROR(IndefiniteBeyondTolerance);
NCARVE_DEFINE_ERROR(TooFewSamples);
NCARVE_DEFINE_ERROR(TooSmall);
NCARVE_DEFINE_ERROR(NotEnoughCandidates);

// encoder / generator
NCARVE_DEFINE_ERROR(ShapeMismatch);
NCARVE_DEFINE_ERROR(TooManyFrames);
NCARVE_DEFINE_ERROR(EmptyList);
NCARVE_DEFINE_ERROR(GraphNotRecorded);
NCARVE_DEFINE_ERROR(EmptyDataset);
NCARVE_DEFINE_ERROR(DivergedLoss);
NCARVE_DEFINE_ERROR(BadTimestep);
NCARVE_DEFINE_ERROR(RankDimMismatch);
NCARVE_DEFINE_ERROR(EmptyBatch);
NCARVE_DEFINE_ERROR(NonFinite);
NCARVE_DEFINE_ERROR(UntrainedWeights);

// reconstruction
NCARVE_DEFINE_ERROR(PoseCountMismatch);
NCARVE_DEFINE_ERROR(EmptyGrid);
NCARVE_DEFINE_ERROR(EmptyReconstruction);

// analysis
NCARVE_DEFINE_ERROR(SingleClass);
NCARVE_DEFINE_ERROR(ZeroVariance);
NCARVE_DEFINE_ERROR(LayoutMismatch);
NCARVE_DEFINE_ERROR(TooFewSignals);
NCARVE_DEFINE_ERROR(UntrainedProbe);

// harness
NCARVE_DEFINE_ERROR(InvalidSpec);
NCARVE_DEFINE_ERROR(SubjectNotFound);

#undef NCARVE_DEFINE_ERROR

}  // namespace ncarve
