#pragma once

namespace flipdistill::vocab {

// Reserved ids shared by the teacher, the student and the corpus generator.
inline constexpr int kPad = 0;
inline constexpr int kUnk = 1;
inline constexpr int kMatch = 2;
inline constexpr int kSep = 3;
inline constexpr int kAns = 4;
inline constexpr int kYes = 5;
inline constexpr int kNo = 6;
inline constexpr int kFirstContent = 8;

}  // namespace flipdistill::vocab
