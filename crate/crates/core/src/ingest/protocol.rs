use std::fmt;

use serde::de::{self, SeqAccess, Visitor};
use serde::ser::SerializeTuple;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Protocols tracked per packet, in feature-vector order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Protocol {
    Arp,
    Llc,
    Ip,
    Icmp,
    Icmpv6,
    Eapol,
    Tcp,
    Udp,
    Http,
    Https,
    Dhcp,
    Bootp,
    Ssdp,
    Dns,
    Mdns,
    Ntp,
}

impl Protocol {
    pub const COUNT: usize = 16;

    pub const ALL: [Protocol; Protocol::COUNT] = [
        Protocol::Arp,
        Protocol::Llc,
        Protocol::Ip,
        Protocol::Icmp,
        Protocol::Icmpv6,
        Protocol::Eapol,
        Protocol::Tcp,
        Protocol::Udp,
        Protocol::Http,
        Protocol::Https,
        Protocol::Dhcp,
        Protocol::Bootp,
        Protocol::Ssdp,
        Protocol::Dns,
        Protocol::Mdns,
        Protocol::Ntp,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Arp => "ARP",
            Protocol::Llc => "LLC",
            Protocol::Ip => "IP",
            Protocol::Icmp => "ICMP",
            Protocol::Icmpv6 => "ICMPv6",
            Protocol::Eapol => "EAPOL",
            Protocol::Tcp => "TCP",
            Protocol::Udp => "UDP",
            Protocol::Http => "HTTP",
            Protocol::Https => "HTTPS",
            Protocol::Dhcp => "DHCP",
            Protocol::Bootp => "BOOTP",
            Protocol::Ssdp => "SSDP",
            Protocol::Dns => "DNS",
            Protocol::Mdns => "MDNS",
            Protocol::Ntp => "NTP",
        }
    }
}

/// Presence bit vector over [`Protocol::ALL`].
///
/// Serialized as a 16-element array of `0`/`1` integers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ProtocolFlags(u16);

impl ProtocolFlags {
    pub const fn empty() -> Self {
        ProtocolFlags(0)
    }

    pub const fn from_bits(bits: u16) -> Self {
        ProtocolFlags(bits)
    }

    pub fn bits(self) -> u16 {
        self.0
    }

    pub fn of(protocols: &[Protocol]) -> Self {
        let mut flags = ProtocolFlags::empty();
        for &p in protocols {
            flags.set(p);
        }
        flags
    }

    pub fn set(&mut self, protocol: Protocol) {
        self.0 |= 1 << protocol.index();
    }

    pub fn with(mut self, protocol: Protocol) -> Self {
        self.set(protocol);
        self
    }

    pub fn contains(self, protocol: Protocol) -> bool {
        self.0 & (1 << protocol.index()) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Whether ports are meaningful for this packet.
    pub fn has_transport(self) -> bool {
        self.contains(Protocol::Tcp) || self.contains(Protocol::Udp)
    }

    pub fn to_array(self) -> [u8; Protocol::COUNT] {
        let mut out = [0u8; Protocol::COUNT];
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = ((self.0 >> i) & 1) as u8;
        }
        out
    }

    pub fn from_array(values: &[u8; Protocol::COUNT]) -> Option<Self> {
        let mut bits = 0u16;
        for (i, &v) in values.iter().enumerate() {
            match v {
                0 => {}
                1 => bits |= 1 << i,
                _ => return None,
            }
        }
        Some(ProtocolFlags(bits))
    }

    pub fn iter(self) -> impl Iterator<Item = Protocol> {
        Protocol::ALL.into_iter().filter(move |p| self.contains(*p))
    }
}

impl fmt::Display for ProtocolFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.iter().map(Protocol::name).collect();
        write!(f, "{}", names.join("+"))
    }
}

impl Serialize for ProtocolFlags {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut tup = serializer.serialize_tuple(Protocol::COUNT)?;
        for v in self.to_array() {
            tup.serialize_element(&v)?;
        }
        tup.end()
    }
}

impl<'de> Deserialize<'de> for ProtocolFlags {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct FlagsVisitor;

        impl<'de> Visitor<'de> for FlagsVisitor {
            type Value = ProtocolFlags;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                write!(f, "an array of {} zeros and ones", Protocol::COUNT)
            }

            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Self::Value, A::Error> {
                let mut values = [0u8; Protocol::COUNT];
                for (i, slot) in values.iter_mut().enumerate() {
                    *slot = seq
                        .next_element()?
                        .ok_or_else(|| de::Error::invalid_length(i, &self))?;
                }
                if seq.next_element::<u8>()?.is_some() {
                    return Err(de::Error::invalid_length(Protocol::COUNT + 1, &self));
                }
                ProtocolFlags::from_array(&values)
                    .ok_or_else(|| de::Error::custom("protocol flag values must be 0 or 1"))
            }
        }

        deserializer.deserialize_tuple(Protocol::COUNT, FlagsVisitor)
    }
}
